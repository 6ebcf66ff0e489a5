"""Command-line interface: dataset generation, training, prediction,
evaluation, and small string utilities.

Heavy numeric imports happen inside the command bodies so that the group
level --threads option can cap BLAS pools through environment variables
before the first numpy import. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import json
import os
import sys
import zipfile

import click

from .manifest import RunManifest

PRETRAIN_DEFAULTS = {"lr": 3e-4, "batch": 32, "patience": 10}
FINETUNE_DEFAULTS = {"lr": 0.5e-4, "batch": 2, "patience": 40, "eval_every": 20}


@click.group()
@click.version_option(package_name="pfd2pid")
@click.option(
    "--threads",
    type=int,
    default=None,
    help="Cap BLAS worker threads (set before numpy loads).",
)
def main(threads):
    """Predict P&ID flowsheets from PFD flowsheets in SFILES notation."""
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be >= 1")
        for var in (
            "OPENBLAS_NUM_THREADS",
            "OMP_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ[var] = str(threads)


def _load_checkpoint(path):
    from .model import Checkpoint

    try:
        checkpoint = Checkpoint.load(path)
    except (ValueError, KeyError, OSError, zipfile.BadZipFile) as exc:
        raise click.UsageError(f"cannot load checkpoint {path}: {exc}")
    if checkpoint.vocab is None:
        raise click.UsageError(f"checkpoint {path} has no embedded vocabulary")
    return checkpoint


def _load_dataset(path, what="dataset"):
    from .pipeline import load_pairs

    try:
        pairs = load_pairs(path)
    except (ValueError, KeyError, OSError) as exc:
        raise click.UsageError(f"cannot read {what} {path}: {exc}")
    return pairs


@main.command()
@click.option("--n", required=True, type=int, help="Number of PFD/P&ID pairs.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option(
    "--patterns",
    envvar="PID_SYNTH_PATTERNS",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Pattern library JSON; the packaged library when omitted "
    "(env: PID_SYNTH_PATTERNS).",
)
@click.option(
    "--strip-valves",
    is_flag=True,
    help="Also remove valves when deriving the input PFD.",
)
@click.option("--out", required=True, type=click.Path(dir_okay=False, writable=True))
def generate(n, seed, patterns, strip_valves, out):
    """Generate a synthetic PFD -> P&ID dataset as JSONL."""
    from .generator import GenerationError, GeneratorConfig, generate_dataset
    from .pipeline import save_pairs

    if n < 1:
        raise click.UsageError("--n must be >= 1")
    manifest = RunManifest(
        command="generate",
        config={"n": n, "strip_valves": strip_valves, "patterns": patterns},
        seeds={"seed": seed},
    )
    try:
        config = GeneratorConfig.default(
            seed, library_path=patterns, strip_valves_in_input=strip_valves
        )
    except (GenerationError, ValueError, OSError) as exc:
        raise click.UsageError(f"bad pattern library: {exc}")
    manifest.add_input(
        "patterns",
        path=patterns,
        data=None if patterns else json.dumps(config.patterns, sort_keys=True).encode(),
    )
    try:
        pairs = generate_dataset(config, n)
    except GenerationError as exc:
        raise click.ClickException(str(exc))
    save_pairs(pairs, out)
    manifest.finish(out).write(f"{out}.manifest.json")
    click.echo(f"wrote {len(pairs)} pairs to {out}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--val",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Validation JSONL; the training set itself when omitted.",
)
@click.option("--lr", type=float, default=None, help="Default 3e-4 (5e-5 with --init).")
@click.option("--batch", type=int, default=None, help="Default 32 (2 with --init).")
@click.option(
    "--eval-every",
    type=int,
    default=None,
    help="Steps between evaluations. Default scales with the training set: "
    "500 from 10k samples, 25 from 1k, else 5 (20 with --init).",
)
@click.option("--patience", type=int, default=None, help="Default 10 (40 with --init).")
@click.option(
    "--init",
    "init_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Fine-tune from this checkpoint instead of training fresh weights.",
)
@click.option("--out", required=True, type=click.Path(dir_okay=False, writable=True))
@click.option(
    "--max-len",
    default=384,
    show_default=True,
    type=int,
    help="Token budget per sequence for fresh models (ignored with --init).",
)
@click.option("--max-steps", type=int, default=None, help="Optional hard step budget.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option(
    "--history",
    type=click.Path(dir_okay=False, writable=True),
    default=None,
    help="Loss history CSV path. [default: <out>.history.csv]",
)
def train(data, val, lr, batch, eval_every, patience, init_path, out, max_len, max_steps, seed, history):
    """Train a prediction model, or fine-tune one with --init."""
    from .model import (
        DivergenceError,
        ModelConfig,
        TrainConfig,
        Transformer,
        encode_pairs,
    )
    from .model import train as run_training
    from .tokenizer import Vocabulary, tokenize

    train_pairs = _load_dataset(data, "training data")
    if not train_pairs:
        raise click.UsageError(f"training set {data} is empty")
    val_pairs = _load_dataset(val, "validation data") if val else train_pairs

    defaults = dict(PRETRAIN_DEFAULTS)
    if init_path:
        defaults.update(FINETUNE_DEFAULTS)
        checkpoint = _load_checkpoint(init_path)
        vocab = checkpoint.vocab
        model = checkpoint.to_model()
    else:
        n = len(train_pairs)
        defaults["eval_every"] = 500 if n >= 10_000 else 25 if n >= 1_000 else 5
        texts = (t for p in train_pairs for t in (p.pfd_sfiles.text, p.pid_sfiles.text))
        vocab = Vocabulary.build(tokenize(t) for t in texts)
        model = Transformer(
            ModelConfig(vocab_size=vocab.size, max_len=max_len), seed=seed
        )

    history = history or f"{out}.history.csv"
    try:
        train_config = TrainConfig(
            learning_rate=lr if lr is not None else defaults["lr"],
            batch_size=batch if batch is not None else defaults["batch"],
            eval_every=eval_every if eval_every is not None else defaults["eval_every"],
            patience=patience if patience is not None else defaults["patience"],
            seed=seed,
            max_steps=max_steps,
            history_path=history,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))

    manifest = RunManifest(
        command="train",
        config={
            "model": model.config.to_json_dict(),
            "learning_rate": train_config.learning_rate,
            "batch_size": train_config.batch_size,
            "eval_every": train_config.eval_every,
            "patience": train_config.patience,
            "max_steps": max_steps,
            "init": init_path,
        },
        seeds={"seed": seed},
    )
    manifest.add_input("data", path=data)
    if val:
        manifest.add_input("val", path=val)
    if init_path:
        manifest.add_input("init", path=init_path)

    try:
        train_items = encode_pairs(train_pairs, vocab)
        val_items = encode_pairs(val_pairs, vocab)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    click.echo(
        f"training on {len(train_items)} pairs (val {len(val_items)}), "
        f"vocab {vocab.size}, {model.config.d_model}-dim model, "
        f"eval every {train_config.eval_every} steps"
    )
    try:
        checkpoint = run_training(model, train_items, val_items, train_config, vocab)
    except DivergenceError as exc:
        raise click.ClickException(str(exc))
    except ValueError as exc:
        raise click.UsageError(str(exc))
    checkpoint.save(out)
    manifest.finish(out, history).write(f"{out}.manifest.json")
    click.echo(
        f"best validation loss {checkpoint.best_val_loss:.6f} at step "
        f"{checkpoint.step}; checkpoint: {out}"
    )


def _read_inputs(source: str) -> list[str]:
    """One SFILES per line when source names a file, else a literal string."""
    if os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip()]
    return [source.strip()]


@main.command()
@click.option(
    "--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False)
)
@click.option(
    "--in",
    "source",
    required=True,
    help="Input PFD: an SFILES literal, or a path to a file of one per line.",
)
@click.option("--beam", default=5, show_default=True, type=int)
@click.option("--top-k", default=5, show_default=True, type=int)
@click.option(
    "--emit",
    type=click.Choice(["sfiles", "graph-json"]),
    default="sfiles",
    show_default=True,
    help="graph-json adds the parsed graph and its canonical re-serialization.",
)
@click.option("--max-len", type=int, default=None, help="Decoding length cap.")
@click.option(
    "--manifest",
    "manifest_path",
    type=click.Path(dir_okay=False, writable=True),
    default=None,
    help="Also record a run manifest at this path.",
)
def predict(model_path, source, beam, top_k, emit, max_len, manifest_path):
    """Decode ranked P&ID candidates for each input PFD, one JSON per line."""
    from .codec import ParseError, canonicalize, parse
    from .model import translate

    if beam < 1 or top_k < 1:
        raise click.UsageError("--beam and --top-k must be >= 1")
    checkpoint = _load_checkpoint(model_path)
    model = checkpoint.to_model()
    inputs = _read_inputs(source)
    if not inputs:
        raise click.UsageError(f"no inputs found in {source}")

    for text in inputs:
        try:
            ranked = translate(
                model, checkpoint.vocab, text, beam_width=beam, top_k=top_k, max_len=max_len
            )
        except (ParseError, ValueError) as exc:
            raise click.UsageError(f"bad input {text!r}: {exc}")
        predictions = []
        for rank, (sfiles, log_prob, finished) in enumerate(ranked, start=1):
            entry = {
                "rank": rank,
                "sfiles": sfiles,
                "log_prob": log_prob,
                "finished": finished,
            }
            try:
                graph = parse(sfiles)
            except ParseError:
                entry["valid"] = False
            else:
                entry["valid"] = True
                if emit == "graph-json":
                    entry["canonical"] = canonicalize(sfiles).text
                    entry["graph"] = graph.to_json_dict()
            predictions.append(entry)
        click.echo(json.dumps({"input": text, "predictions": predictions}))

    if manifest_path:
        manifest = RunManifest(
            command="predict",
            config={"beam": beam, "top_k": top_k, "emit": emit, "max_len": max_len},
            seeds={},
        )
        manifest.add_input("model", path=model_path)
        if os.path.exists(source):
            manifest.add_input("inputs", path=source)
        else:
            manifest.add_input("inputs", data=source.encode())
        manifest.finish().write(manifest_path)


@main.command(name="eval")
@click.option(
    "--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False)
)
@click.option("--test", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=5, show_default=True, type=int, help="Largest k to report.")
@click.option("--beam", default=5, show_default=True, type=int)
@click.option("--max-len", type=int, default=None, help="Decoding length cap.")
@click.option("--json", "as_json", is_flag=True, help="Emit the report as JSON.")
@click.option(
    "--manifest",
    "manifest_path",
    type=click.Path(dir_okay=False, writable=True),
    default=None,
    help="Also record a run manifest at this path.",
)
def eval_command(model_path, test, k, beam, max_len, as_json, manifest_path):
    """Score top-k accuracy of a model on a JSONL test set."""
    from .model import translate
    from .pipeline import evaluate_top_k

    if k < 1 or beam < 1:
        raise click.UsageError("--k and --beam must be >= 1")
    pairs = _load_dataset(test, "test set")
    if not pairs:
        raise click.UsageError(f"test set {test} is empty")
    checkpoint = _load_checkpoint(model_path)
    model = checkpoint.to_model()

    predictions = []
    for pair in pairs:
        ranked = translate(
            model,
            checkpoint.vocab,
            pair.pfd_sfiles.text,
            beam_width=beam,
            top_k=k,
            max_len=max_len,
        )
        predictions.append([sfiles for sfiles, _, _ in ranked])
    report = evaluate_top_k(
        predictions,
        [p.pid_sfiles.text for p in pairs],
        k_max=k,
        input_pfds=[p.pfd_sfiles.text for p in pairs],
    )
    click.echo(json.dumps(report.to_json_dict()) if as_json else report.format_table())

    if manifest_path:
        manifest = RunManifest(
            command="eval",
            config={"k": k, "beam": beam, "max_len": max_len},
            seeds={},
        )
        manifest.add_input("model", path=model_path)
        manifest.add_input("test", path=test)
        manifest.finish().write(manifest_path)


@main.group()
def tools():
    """String utilities: canonicalize, augment, tokenize, strip."""


def _sfiles_argument(sfiles: str | None) -> str:
    if sfiles is None:
        sfiles = click.get_text_stream("stdin").read()
    sfiles = sfiles.strip()
    if not sfiles:
        raise click.UsageError("pass an SFILES string or pipe one on stdin")
    return sfiles


@tools.command()
@click.argument("sfiles", required=False)
def canonicalize(sfiles):
    """Rewrite an SFILES string in canonical form."""
    from .codec import ParseError
    from .codec import canonicalize as canonical

    try:
        click.echo(canonical(_sfiles_argument(sfiles)).text)
    except ParseError as exc:
        raise click.UsageError(str(exc))


@tools.command()
@click.argument("sfiles", required=False)
@click.option("--n", default=5, show_default=True, type=int, help="Number of variants.")
@click.option("--seed", default=0, show_default=True, type=int)
def augment(sfiles, n, seed):
    """Emit n randomized equivalent writings of an SFILES string."""
    from .codec import ParseError
    from .codec import augment as augmented

    if n < 1:
        raise click.UsageError("--n must be >= 1")
    try:
        for variant in augmented(_sfiles_argument(sfiles), n, seed):
            click.echo(variant.text)
    except ParseError as exc:
        raise click.UsageError(str(exc))


@tools.command()
@click.argument("sfiles", required=False)
def tokenize(sfiles):
    """Split an SFILES string into model tokens, space separated."""
    from .tokenizer import TokenizeError
    from .tokenizer import tokenize as split_tokens

    try:
        click.echo(" ".join(split_tokens(_sfiles_argument(sfiles))))
    except TokenizeError as exc:
        raise click.UsageError(str(exc))


@tools.command()
@click.argument("sfiles", required=False)
@click.option("--remove-valves", is_flag=True, help="Also drop valves.")
def strip(sfiles, remove_valves):
    """Strip control structure from a P&ID string, yielding its PFD."""
    from .codec import ParseError
    from .graph import StripError
    from .pipeline import strip_string

    try:
        click.echo(strip_string(_sfiles_argument(sfiles), remove_valves=remove_valves).text)
    except (ParseError, StripError) as exc:
        raise click.UsageError(str(exc))


if __name__ == "__main__":
    main()
