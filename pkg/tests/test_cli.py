import json

import pytest
from click.testing import CliRunner

from pfd2pid.cli import main
from pfd2pid.codec import canonicalize as canonicalize_string
from pfd2pid.graph import FlowsheetGraph
from pfd2pid.codec import serialize
from pfd2pid.model import Checkpoint
from pfd2pid.pipeline import load_pairs

from .conftest import COLUMN_PFD, REFERENCE_PFD, REFERENCE_PID, REFERENCE_TOKENS


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """A generate -> train pipeline at toy scale, shared across tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "toy.jsonl"
    model = root / "toy.npz"
    runner = CliRunner()
    result = runner.invoke(
        main, ["generate", "--n", "6", "--seed", "3", "--out", str(data)]
    )
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main,
        [
            "train", "--data", str(data), "--out", str(model),
            "--max-steps", "150", "--eval-every", "25",
            "--lr", "1e-3", "--batch", "4",
        ],
    )
    assert result.exit_code == 0, result.output
    return root, data, model


class TestGenerate:
    def test_same_seed_reproduces_file(self, runner, tmp_path):
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for p in paths:
            result = runner.invoke(
                main, ["generate", "--n", "3", "--seed", "11", "--out", str(p)]
            )
            assert result.exit_code == 0, result.output
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_seed_changes_output(self, runner, tmp_path):
        outputs = []
        for seed in ("1", "2"):
            p = tmp_path / f"s{seed}.jsonl"
            runner.invoke(main, ["generate", "--n", "3", "--seed", seed, "--out", str(p)])
            outputs.append(p.read_bytes())
        assert outputs[0] != outputs[1]

    def test_single_pair(self, runner, tmp_path):
        out = tmp_path / "one.jsonl"
        result = runner.invoke(main, ["generate", "--n", "1", "--out", str(out)])
        assert result.exit_code == 0
        assert len(load_pairs(out)) == 1

    def test_manifest_written(self, runner, tmp_path):
        out = tmp_path / "m.jsonl"
        runner.invoke(main, ["generate", "--n", "2", "--seed", "5", "--out", str(out)])
        manifest = json.loads((tmp_path / "m.jsonl.manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["seeds"] == {"seed": 5}
        assert manifest["inputs"]["patterns"]["blob"]
        assert manifest["outputs"] == [str(out)]

    def test_zero_n_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(main, ["generate", "--n", "0", "--out", str(tmp_path / "x")])
        assert result.exit_code == 2

    def test_malformed_patterns_is_usage_error(self, runner, tmp_path):
        lib = tmp_path / "lib.json"
        lib.write_text('{"transition_probs": {}}')
        result = runner.invoke(
            main,
            ["generate", "--n", "1", "--patterns", str(lib), "--out", str(tmp_path / "x")],
        )
        assert result.exit_code == 2
        assert "pattern library" in result.output

    def test_missing_patterns_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["generate", "--n", "1", "--patterns", str(tmp_path / "nope.json"),
             "--out", str(tmp_path / "x")],
        )
        assert result.exit_code == 2

    def test_patterns_env_var(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["generate", "--n", "1", "--out", str(tmp_path / "x")],
            env={"PID_SYNTH_PATTERNS": str(tmp_path / "nope.json")},
        )
        assert result.exit_code == 2


class TestTrain:
    def test_checkpoint_and_history(self, toy_run):
        root, data, model = toy_run
        checkpoint = Checkpoint.load(model)
        assert checkpoint.config.d_model == 128
        assert checkpoint.vocab is not None
        history = (root / "toy.npz.history.csv").read_text().splitlines()
        assert history[0] == "epochs,loss_train,loss_val"
        assert len(history) > 1
        manifest = json.loads((root / "toy.npz.manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["model"]["vocab_size"] == checkpoint.vocab.size

    def test_default_eval_cadence_for_small_data(self, runner, toy_run, tmp_path):
        _, data, _ = toy_run
        result = runner.invoke(
            main,
            ["train", "--data", str(data), "--out", str(tmp_path / "d.npz"),
             "--max-steps", "0"],
        )
        assert result.exit_code == 0, result.output
        assert "eval every 5 steps" in result.output

    def test_finetune_defaults(self, runner, toy_run, tmp_path):
        _, data, model = toy_run
        result = runner.invoke(
            main,
            ["train", "--data", str(data), "--init", str(model),
             "--out", str(tmp_path / "ft.npz"), "--max-steps", "0"],
        )
        assert result.exit_code == 0, result.output
        assert "eval every 20 steps" in result.output
        tuned = Checkpoint.load(tmp_path / "ft.npz")
        assert tuned.config == Checkpoint.load(model).config

    def test_missing_data_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x")],
        )
        assert result.exit_code == 2

    def test_empty_data_is_usage_error(self, runner, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        result = runner.invoke(
            main, ["train", "--data", str(empty), "--out", str(tmp_path / "x.npz")]
        )
        assert result.exit_code == 2
        assert "empty" in result.output

    def test_nonpositive_lr_is_usage_error(self, runner, toy_run, tmp_path):
        _, data, _ = toy_run
        result = runner.invoke(
            main,
            ["train", "--data", str(data), "--out", str(tmp_path / "x.npz"), "--lr", "0"],
        )
        assert result.exit_code == 2

    def test_sequences_over_max_len_are_usage_error(self, runner, toy_run, tmp_path):
        _, data, _ = toy_run
        result = runner.invoke(
            main,
            ["train", "--data", str(data), "--out", str(tmp_path / "x.npz"),
             "--max-len", "8"],
        )
        assert result.exit_code == 2
        assert "max_len" in result.output


class TestPredict:
    def test_literal_input_emits_ranked_json(self, runner, toy_run):
        _, data, model = toy_run
        pfd = load_pairs(data)[0].pfd_sfiles.text
        result = runner.invoke(
            main, ["predict", "--model", str(model), "--in", pfd, "--top-k", "3"]
        )
        assert result.exit_code == 0, result.output
        record = json.loads(result.output)
        assert record["input"] == pfd
        assert 1 <= len(record["predictions"]) <= 3
        for rank, entry in enumerate(record["predictions"], start=1):
            assert entry["rank"] == rank
            assert entry["log_prob"] <= 0.0
            assert isinstance(entry["valid"], bool)

    def test_file_input_one_record_per_line(self, runner, toy_run, tmp_path):
        _, data, model = toy_run
        pairs = load_pairs(data)[:2]
        batch = tmp_path / "inputs.txt"
        batch.write_text("".join(p.pfd_sfiles.text + "\n" for p in pairs))
        result = runner.invoke(
            main, ["predict", "--model", str(model), "--in", str(batch), "--top-k", "1"]
        )
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert len(lines) == 2
        for line, pair in zip(lines, pairs):
            record = json.loads(line)
            assert record["input"] == pair.pfd_sfiles.text
            assert len(record["predictions"]) == 1

    def test_graph_json_reserializes_to_emitted_sfiles(self, runner, toy_run):
        _, data, model = toy_run
        checked = 0
        for pair in load_pairs(data)[:3]:
            result = runner.invoke(
                main,
                ["predict", "--model", str(model), "--in", pair.pfd_sfiles.text,
                 "--emit", "graph-json"],
            )
            assert result.exit_code == 0, result.output
            record = json.loads(result.output)
            for entry in record["predictions"]:
                if not entry["valid"]:
                    assert "graph" not in entry
                    continue
                graph = FlowsheetGraph.from_json_dict(entry["graph"])
                assert serialize(graph).text == entry["canonical"]
                assert canonicalize_string(entry["sfiles"]).text == entry["canonical"]
                checked += 1
        assert checked >= 1

    def test_manifest_opt_in(self, runner, toy_run, tmp_path):
        _, data, model = toy_run
        pfd = load_pairs(data)[0].pfd_sfiles.text
        manifest_path = tmp_path / "run.json"
        result = runner.invoke(
            main,
            ["predict", "--model", str(model), "--in", pfd, "--top-k", "1",
             "--manifest", str(manifest_path)],
        )
        assert result.exit_code == 0, result.output
        manifest = json.loads(manifest_path.read_text())
        assert manifest["command"] == "predict"
        assert set(manifest["inputs"]) == {"model", "inputs"}

    def test_unparseable_input_is_usage_error(self, runner, toy_run):
        _, _, model = toy_run
        result = runner.invoke(
            main, ["predict", "--model", str(model), "--in", "((("]
        )
        assert result.exit_code == 2

    def test_garbage_model_file_is_usage_error(self, runner, toy_run, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a checkpoint")
        result = runner.invoke(
            main, ["predict", "--model", str(bad), "--in", REFERENCE_PFD]
        )
        assert result.exit_code == 2


class TestEval:
    def test_table_output(self, runner, toy_run):
        _, data, model = toy_run
        result = runner.invoke(
            main, ["eval", "--model", str(model), "--test", str(data), "--k", "2"]
        )
        assert result.exit_code == 0, result.output
        assert "top-k accuracy" in result.output
        assert "samples: 6" in result.output

    def test_json_output_is_monotone(self, runner, toy_run, tmp_path):
        _, data, model = toy_run
        manifest_path = tmp_path / "eval.json"
        result = runner.invoke(
            main,
            ["eval", "--model", str(model), "--test", str(data), "--k", "3",
             "--json", "--manifest", str(manifest_path)],
        )
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        accs = [report["top_k_accuracy"][str(k)] for k in (1, 2, 3)]
        assert accs == sorted(accs)
        assert report["n_samples"] == 6
        assert json.loads(manifest_path.read_text())["command"] == "eval"

    def test_empty_test_set_is_usage_error(self, runner, toy_run, tmp_path):
        _, _, model = toy_run
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        result = runner.invoke(
            main, ["eval", "--model", str(model), "--test", str(empty)]
        )
        assert result.exit_code == 2
        assert "empty" in result.output


class TestTools:
    def test_strip_reference_pid(self, runner):
        result = runner.invoke(main, ["tools", "strip", REFERENCE_PID])
        assert result.exit_code == 0, result.output
        assert result.output.strip() == REFERENCE_PFD

    def test_canonicalize_is_idempotent(self, runner):
        once = runner.invoke(main, ["tools", "canonicalize", COLUMN_PFD])
        twice = runner.invoke(main, ["tools", "canonicalize", once.output.strip()])
        assert once.exit_code == twice.exit_code == 0
        assert once.output == twice.output

    def test_tokenize_reference_split(self, runner):
        result = runner.invoke(main, ["tools", "tokenize", REFERENCE_PID])
        assert result.exit_code == 0
        assert result.output.strip() == " ".join(REFERENCE_TOKENS)

    def test_tokenize_reads_stdin(self, runner):
        result = runner.invoke(main, ["tools", "tokenize"], input=REFERENCE_PID + "\n")
        assert result.exit_code == 0
        assert result.output.strip() == " ".join(REFERENCE_TOKENS)

    def test_augment_variants_canonicalize_back(self, runner):
        result = runner.invoke(
            main, ["tools", "augment", COLUMN_PFD, "--n", "3", "--seed", "1"]
        )
        assert result.exit_code == 0, result.output
        variants = result.output.strip().splitlines()
        assert len(variants) == 3
        target = canonicalize_string(COLUMN_PFD).text
        assert all(canonicalize_string(v).text == target for v in variants)

    def test_bad_string_is_usage_error(self, runner):
        result = runner.invoke(main, ["tools", "canonicalize", "((("])
        assert result.exit_code == 2

    def test_empty_stdin_is_usage_error(self, runner):
        result = runner.invoke(main, ["tools", "strip"], input="")
        assert result.exit_code == 2


class TestThreads:
    def test_nonpositive_threads_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(
            main, ["--threads", "0", "generate", "--n", "1", "--out", str(tmp_path / "x")]
        )
        assert result.exit_code == 2
