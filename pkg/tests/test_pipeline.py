import json

import pytest

from pfd2pid.codec import (
    RANDOM_MODE,
    BranchOrderPolicy,
    SfilesString,
    canonicalize,
    parse,
    serialize,
)
from pfd2pid.generator import GeneratorConfig, generate_dataset
from pfd2pid.graph import strip_controls
from pfd2pid.pipeline import (
    DatasetPair,
    EvalReport,
    LengthMismatch,
    SplitError,
    augment_dataset,
    evaluate_top_k,
    load_pairs,
    save_pairs,
    split,
    strip_string,
)

from .conftest import REFERENCE_PFD, REFERENCE_PID


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(GeneratorConfig.default(seed=21), 40)


def _pair(i, pfd, pid):
    return DatasetPair(i, SfilesString(pfd), SfilesString(pid))


class TestPersistence:
    def test_json_line_round_trip(self):
        p = _pair(3, "(raw)(prod)", "(raw)(v)(prod)")
        q = DatasetPair.from_json_line(p.to_json_line())
        assert q == p

    def test_file_round_trip(self, dataset, tmp_path):
        path = tmp_path / "pairs.jsonl"
        save_pairs(dataset, path)
        loaded = load_pairs(path)
        assert loaded == dataset

    def test_line_format(self):
        line = _pair(0, "(raw)(prod)", "(raw)(v)(prod)").to_json_line()
        assert json.loads(line) == {"id": 0, "pfd": "(raw)(prod)", "pid": "(raw)(v)(prod)"}


class TestStripString:
    def test_reference_pair(self):
        assert strip_string(REFERENCE_PID).text == REFERENCE_PFD

    def test_remove_valves(self):
        out = strip_string(REFERENCE_PID, remove_valves=True)
        assert "(v)" not in out.text


class TestSplit:
    def test_floor_sizes(self, dataset):
        pairs = [_pair(i, "(raw)(prod)", "(raw)(prod)") for i in range(312)]
        train, val, test = split(pairs, (0.8, 0.1, 0.1), seed=0)
        assert (len(train), len(val), len(test)) == (250, 31, 31)

    def test_partition_preserves_pairs(self, dataset):
        train, val, test = split(dataset, (0.6, 0.2, 0.2), seed=5)
        combined = sorted(p.id for p in train + val + test)
        assert combined == [p.id for p in dataset]

    def test_deterministic_and_seed_sensitive(self, dataset):
        a = split(dataset, (0.8, 0.1, 0.1), seed=9)
        b = split(dataset, (0.8, 0.1, 0.1), seed=9)
        c = split(dataset, (0.8, 0.1, 0.1), seed=10)
        assert [p.id for p in a[0]] == [p.id for p in b[0]]
        assert [p.id for p in a[0]] != [p.id for p in c[0]]

    def test_zero_fraction_is_legal(self, dataset):
        train, val, test = split(dataset, (0.9, 0.1, 0.0), seed=1)
        assert test == [] and len(val) == 4 and len(train) == 36

    def test_nonzero_fraction_that_floors_to_empty(self):
        pairs = [_pair(i, "(raw)(prod)", "(raw)(prod)") for i in range(5)]
        with pytest.raises(SplitError, match="val"):
            split(pairs, (0.85, 0.1, 0.05), seed=0)

    def test_fractions_must_sum_to_one(self, dataset):
        with pytest.raises(ValueError, match="sum"):
            split(dataset, (0.8, 0.1, 0.2), seed=0)


class TestAugmentDataset:
    def test_size_bounds_and_prefix(self, dataset):
        out = augment_dataset(dataset, seed=3)
        assert len(dataset) < len(out) <= 2 * len(dataset)
        assert out[: len(dataset)] == dataset

    def test_new_ids_are_fresh_and_unique(self, dataset):
        out = augment_dataset(dataset, seed=3)
        ids = [p.id for p in out]
        assert len(set(ids)) == len(ids)
        assert min(p.id for p in out[len(dataset) :]) > max(p.id for p in dataset)

    def test_variants_canonicalize_to_an_original_pair(self, dataset):
        by_pid = {p.pid_sfiles.text: p.pfd_sfiles.text for p in dataset}
        out = augment_dataset(dataset, seed=3)
        for variant in out[len(dataset) :]:
            canon_pid = canonicalize(variant.pid_sfiles).text
            assert canon_pid in by_pid
            assert canonicalize(variant.pfd_sfiles).text == by_pid[canon_pid]

    def test_variant_sides_stay_aligned(self, dataset):
        # stripping the variant P&ID must give exactly the variant PFD,
        # canonically speaking: the pair describes one flowsheet
        out = augment_dataset(dataset, seed=3)
        for variant in out[len(dataset) :][:10]:
            stripped = serialize(strip_controls(parse(variant.pid_sfiles)))
            assert stripped.text == canonicalize(variant.pfd_sfiles).text

    def test_deterministic(self, dataset):
        a = augment_dataset(dataset, seed=4)
        b = augment_dataset(dataset, seed=4)
        assert a == b

    def test_branchless_pairs_add_nothing(self):
        pairs = [_pair(0, "(raw)(prod)", "(raw)(v)(prod)")]
        assert augment_dataset(pairs, seed=0) == pairs


class TestEvaluateTopK:
    def test_exact_predictions(self):
        targets = [REFERENCE_PID]
        report = evaluate_top_k([[REFERENCE_PID]], targets, k_max=3)
        assert report.top_k_accuracy == {1: 1.0, 2: 1.0, 3: 1.0}
        assert report.raw_top_k_accuracy[1] == 1.0
        assert report.n_invalid_predictions == 0

    def test_canonical_match_beats_raw_mismatch(self):
        g = parse(REFERENCE_PID)
        variant = next(
            serialize(g, BranchOrderPolicy(RANDOM_MODE, s)).text
            for s in range(20)
            if serialize(g, BranchOrderPolicy(RANDOM_MODE, s)).text != REFERENCE_PID
        )
        report = evaluate_top_k([[variant]], [REFERENCE_PID], k_max=1)
        assert report.top_k_accuracy[1] == 1.0
        assert report.raw_top_k_accuracy[1] == 0.0

    def test_rank_placement(self):
        preds = [["(raw)(prod)", "(raw)(v)(prod)", REFERENCE_PID]]
        report = evaluate_top_k(preds, [REFERENCE_PID], k_max=5)
        assert report.top_k_accuracy[1] == 0.0
        assert report.top_k_accuracy[2] == 0.0
        assert report.top_k_accuracy[3] == 1.0
        assert report.top_k_accuracy[5] == 1.0

    def test_invalid_predictions_counted_and_classified(self):
        preds = [["(raw)(prod", "(raw)(prod)"]]
        report = evaluate_top_k(preds, [REFERENCE_PID], k_max=2)
        assert report.n_invalid_predictions == 1
        assert report.error_breakdown["invalid_sfiles"] == 1

    def test_dangling_categories(self):
        cases = {
            "(raw)1(prod)": "dangling_recycle",
            "(raw)(C){TC}_1(prod)": "dangling_signal",
        }
        for text, category in cases.items():
            report = evaluate_top_k([[text]], [REFERENCE_PID], k_max=1)
            assert report.error_breakdown[category] == 1, text

    def test_unit_mismatch_against_input_pfd(self):
        wrong_units = "(raw)(v)(prod)"
        report = evaluate_top_k(
            [[wrong_units]], [REFERENCE_PID], k_max=1, input_pfds=[REFERENCE_PFD]
        )
        assert report.error_breakdown["unit_mismatch"] == 1

    def test_topology_only_miss_stays_unclassified(self):
        # same unit multiset as the target, different wiring
        target = canonicalize("(raw)(splt)[(prod)](prod)").text
        shuffled = "(raw)(splt)[(prod)(prod)]"
        assert canonicalize(shuffled).text != target
        report = evaluate_top_k([[shuffled]], [target], k_max=1)
        assert report.top_k_accuracy[1] == 0.0
        assert all(v == 0 for v in report.error_breakdown.values())

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate_top_k([[REFERENCE_PID]], [REFERENCE_PID, REFERENCE_PID], k_max=1)
        with pytest.raises(LengthMismatch):
            evaluate_top_k(
                [[REFERENCE_PID]], [REFERENCE_PID], k_max=1, input_pfds=[]
            )

    def test_accuracy_is_monotone_in_k(self, dataset):
        preds = []
        targets = []
        for i, pair in enumerate(dataset[:12]):
            targets.append(pair.pid_sfiles)
            if i % 3 == 0:
                preds.append(["(bogus", pair.pid_sfiles.text])
            elif i % 3 == 1:
                preds.append([pair.pid_sfiles.text])
            else:
                preds.append(["(raw)(prod)"])
        report = evaluate_top_k(preds, targets, k_max=4)
        last = 0.0
        for k in range(1, 5):
            assert report.top_k_accuracy[k] >= last
            last = report.top_k_accuracy[k]

    def test_report_validates_monotonicity(self):
        with pytest.raises(ValueError):
            EvalReport(
                k_max=2,
                n_samples=1,
                top_k_accuracy={1: 0.5, 2: 0.25},
                raw_top_k_accuracy={1: 0.0, 2: 0.0},
                n_invalid_predictions=0,
                error_breakdown={},
            )

    def test_report_serialization_and_table(self):
        report = evaluate_top_k([[REFERENCE_PID]], [REFERENCE_PID], k_max=2)
        d = report.to_json_dict()
        assert json.loads(json.dumps(d)) == d
        table = report.format_table()
        assert "top-k accuracy" in table and "100.0%" in table
