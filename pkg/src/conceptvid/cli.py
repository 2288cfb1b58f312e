"""Command-line entry point.

Subcommands: taxonomy-validate, synth, train, index, retrieve, evaluate,
gradcheck. Settings come from built-in defaults, then an optional
``--config`` file of ``key = value`` lines, then ``--set key=value``
overrides, then dedicated flags. Every run with an output writes a JSON
run manifest holding the fully resolved settings.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Any, Callable

from threadpoolctl import threadpool_limits

from . import __version__
from .corpus import (ParseError, SyntheticCorpusSpec, generate_synthetic_corpus, load_captions,
                     load_embeddings, load_features, write_synthetic_corpus)
from .encoders import EncoderConfig, EncoderParams, EncodingError, init_params
from .evaluation import (DEFAULT_EPSILON, EvaluationError, evaluate_runs, format_comparison,
                         format_report, parse_qrels)
from .retrieval import (RetrievalError, build_index, format_index, format_run,
                        params_fingerprint, parse_index, parse_run, rank_shots)
from .taxonomy import (CATEGORIES, TaxonomyError, expand_query, extend_taxonomy, label_query,
                       load_shipped_taxonomy, load_taxonomy)
from .training import (NumericalError, TrainConfig, TrainingError, end_to_end_gradcheck, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# settings


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).replace(",", " ").split())


def _path(text):
    return None if text in (None, "", "-") else str(text)


# key -> (parser, default). Path-valued keys are listed in PATH_KEYS.
_TRAIN_DEFAULTS = TrainConfig()
_ENC_DEFAULTS = EncoderConfig()
_SYNTH_DEFAULTS = SyntheticCorpusSpec()

SCHEMAS: dict[str, dict[str, tuple[Callable[[Any], Any], Any]]] = {
    "taxonomy-validate": {
        "taxonomy": (_path, None),
        "extend": (_path, None),
    },
    "synth": {
        "out": (_path, None),
        "seed": (int, 0),
        **{f.name: (type(getattr(_SYNTH_DEFAULTS, f.name)), getattr(_SYNTH_DEFAULTS, f.name))
           for f in dataclasses.fields(SyntheticCorpusSpec)
           if f.name not in ("seed", "caption_templates")},
    },
    "train": {
        "features": (_path, None),
        "train_captions": (_path, None),
        "val_captions": (_path, None),
        "embeddings": (_path, None),
        "embeddings2": (_path, None),
        "out": (_path, None),
        "seed": (int, 0),
        "margin": (float, _TRAIN_DEFAULTS.margin),
        "learning_rate": (float, _TRAIN_DEFAULTS.learning_rate),
        "batch_size": (int, _TRAIN_DEFAULTS.batch_size),
        "epochs": (int, _TRAIN_DEFAULTS.epochs),
        "precision": (str, _TRAIN_DEFAULTS.precision),
        "beta1": (float, _TRAIN_DEFAULTS.beta1),
        "beta2": (float, _TRAIN_DEFAULTS.beta2),
        "adam_eps": (float, _TRAIN_DEFAULTS.adam_eps),
        "hidden": (int, _ENC_DEFAULTS.hidden),
        "common_dim": (int, _ENC_DEFAULTS.common_dim),
        "widths": (_ints, _ENC_DEFAULTS.widths),
        "filters": (_ints, _ENC_DEFAULTS.filters),
        "max_frames": (int, _ENC_DEFAULTS.max_frames),
    },
    "index": {
        "checkpoint": (_path, None),
        "features": (_path, None),
        "out": (_path, None),
        "max_frames": (int, _ENC_DEFAULTS.max_frames),
    },
    "retrieve": {
        "checkpoint": (_path, None),
        "embeddings": (_path, None),
        "embeddings2": (_path, None),
        "taxonomy": (_path, None),
        "index": (_path, None),
        "features": (_path, None),
        "concepts": (str, ""),
        "k": (int, 1000),
        "fusion": (str, "score"),
        "queries": (str, "augmented"),
        "tag": (str, "conceptvid"),
        "out": (_path, None),
        "max_frames": (int, _ENC_DEFAULTS.max_frames),
    },
    "evaluate": {
        "run": (_path, None),
        "qrels": (_path, None),
        "compare": (_path, None),
        "epsilon": (float, DEFAULT_EPSILON),
        "format": (str, "text"),
        "out": (_path, None),
    },
    "gradcheck": {
        "seed": (int, 0),
        "tolerance": (float, 1e-4),
    },
}

PATH_KEYS = {"taxonomy", "extend", "out", "features", "train_captions", "val_captions",
             "embeddings", "embeddings2", "checkpoint", "index", "run", "qrels", "compare"}


def read_config(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out: dict[str, str] = {}
    base = Path(path).parent
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path} line {lineno}: {key!r} given twice")
        if key in PATH_KEYS and value not in ("", "-") and not os.path.isabs(value):
            value = str(base / value)
        out[key] = value
    return out


def resolve(command: str, file_values: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Defaults, then config-file values, then overrides, each parsed by its schema."""
    schema = SCHEMAS[command]
    resolved = {k: default for k, (_, default) in schema.items()}
    for source in (file_values, overrides):
        for key, value in source.items():
            if value is None:
                continue
            if key not in schema:
                raise ConfigError(f"unknown setting {key!r} for {command}")
            parse = schema[key][0]
            try:
                resolved[key] = parse(value)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value {value!r} for {key!r}") from None
    return resolved


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) is None]
    if missing:
        raise ConfigError(f"missing setting(s): {', '.join(missing)}")


# ---------------------------------------------------------------------------
# output helpers


def write_atomic(path: str | Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        if isinstance(data, str):
            tmp.write_text(data, "utf-8")
        else:
            tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None
    checkpoint_fingerprint: str | None
    duration_seconds: float
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=list) + "\n"


def _manifest_path(settings: dict, explicit: str | None, is_dir: bool) -> Path | None:
    if explicit:
        return Path(explicit)
    out = settings.get("out")
    if out is None:
        return None
    return Path(out) / "run_manifest.json" if is_dir else Path(out + ".manifest.json")


def _finish(command: str, settings: dict, inputs: dict, outputs: dict, fingerprint: str | None,
            started: float, manifest: Path | None) -> None:
    for name, p in outputs.items():
        if not Path(p).exists():
            raise RuntimeError(f"output {name} was not written: {p}")
    if manifest is None:
        return
    rm = RunManifest(command, settings, {k: v for k, v in inputs.items() if v is not None},
                     outputs, settings.get("seed"), fingerprint, round(time.time() - started, 3))
    write_atomic(manifest, rm.to_json())


def _load_params(path: str, max_frames: int) -> EncoderParams:
    return EncoderParams.from_bytes(Path(path).read_bytes(), max_frames=max_frames)


# ---------------------------------------------------------------------------
# subcommands


def cmd_taxonomy_validate(s: dict, args) -> int:
    if s["taxonomy"]:
        tree = load_taxonomy(Path(s["taxonomy"]).read_text("utf-8"))
    else:
        tree = load_shipped_taxonomy()
    if s["extend"]:
        tree = extend_taxonomy(tree, Path(s["extend"]).read_text("utf-8"))
    level1 = tree.level(1)
    print(f"ok: {len(tree)} concepts, {len(level1)} level-1, {len(tree.level(2))} level-2")
    for cat in CATEGORIES:
        names = ", ".join(tree[c].label for c in tree.by_category[cat])
        print(f"{cat}: {names}")
    return EXIT_OK


def cmd_synth(s: dict, args) -> int:
    _require(s, "out")
    spec_fields = {f.name for f in dataclasses.fields(SyntheticCorpusSpec)}
    try:
        spec = SyntheticCorpusSpec(**{k: v for k, v in s.items() if k in spec_fields})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    corpus = generate_synthetic_corpus(spec)
    manifest = write_synthetic_corpus(corpus, s["out"])
    outputs = dict(manifest["paths"], manifest=str(Path(s["out"]) / "manifest.json"))
    _finish("synth", s, {}, outputs, None, args.started, _manifest_path(s, args.manifest, True))
    print(f"wrote {len(corpus.shots)} shots, {len(corpus.train_pairs)} training and "
          f"{len(corpus.val_pairs)} validation captions to {s['out']}")
    return EXIT_OK


def cmd_train(s: dict, args) -> int:
    _require(s, "features", "train_captions", "embeddings", "out")
    try:
        tcfg = TrainConfig(margin=s["margin"], learning_rate=s["learning_rate"],
                           batch_size=s["batch_size"], epochs=s["epochs"], seed=s["seed"],
                           precision=s["precision"], beta1=s["beta1"], beta2=s["beta2"],
                           adam_eps=s["adam_eps"])
    except TrainingError as exc:
        raise ConfigError(str(exc)) from None
    shots = load_features(s["features"])
    features = {sh.shot_id: sh for sh in shots}
    pairs = load_captions(s["train_captions"])
    val = load_captions(s["val_captions"]) if s["val_captions"] else None
    table = load_embeddings(s["embeddings"], s["embeddings2"])
    try:
        ecfg = EncoderConfig(feature_dim=shots[0].dim, embed_dim=table.dim, vocab_size=len(table),
                             hidden=s["hidden"], common_dim=s["common_dim"],
                             widths=s["widths"], filters=s["filters"], max_frames=s["max_frames"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    params = init_params(ecfg, seed=s["seed"])

    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    stage = out / f".staging{os.getpid()}"
    lines = ["# epoch mean_loss recall@1 recall@5 median_rank"]

    def log(rec):
        lines.append(rec.log_line())
        print(rec.log_line(), flush=True)

    print(lines[0], flush=True)
    try:
        result = train(pairs, features, table, params, tcfg, val_pairs=val,
                       checkpoint_dir=stage, on_epoch=log)
        write_atomic(stage / "final.denc", result.params.to_bytes())
        write_atomic(stage / "train.log", "\n".join(lines) + "\n")
        names = sorted(p.name for p in stage.iterdir())
        for name in names:
            os.replace(stage / name, out / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    fingerprint = params_fingerprint(result.best_params)
    outputs = {n.rsplit(".", 1)[0]: str(out / n) for n in names}
    inputs = {k: s[k] for k in ("features", "train_captions", "val_captions", "embeddings",
                                "embeddings2")}
    _finish("train", s, inputs, outputs, fingerprint, args.started,
            _manifest_path(s, args.manifest, True))
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'best.denc'} "
          f"fingerprint {fingerprint[:16]}")
    return EXIT_OK


def cmd_index(s: dict, args) -> int:
    _require(s, "checkpoint", "features", "out")
    params = _load_params(s["checkpoint"], s["max_frames"])
    index = build_index(load_features(s["features"]), params)
    write_atomic(s["out"], format_index(index))
    _finish("index", s, {"checkpoint": s["checkpoint"], "features": s["features"]},
            {"index": s["out"]}, index.fingerprint, args.started,
            _manifest_path(s, args.manifest, False))
    print(f"indexed {len(index)} shots into {s['out']}")
    return EXIT_OK


def cmd_retrieve(s: dict, args) -> int:
    _require(s, "checkpoint", "embeddings", "out")
    if (s["index"] is None) == (s["features"] is None):
        raise ConfigError("give exactly one of index or features")
    if s["fusion"] not in ("score", "embedding"):
        raise ConfigError(f"fusion must be 'score' or 'embedding', not {s['fusion']!r}")
    if s["queries"] not in ("augmented", "label"):
        raise ConfigError(f"queries must be 'augmented' or 'label', not {s['queries']!r}")
    if s["k"] < 1:
        raise ConfigError("k must be at least 1")
    params = _load_params(s["checkpoint"], s["max_frames"])
    fingerprint = params_fingerprint(params)
    if s["index"] is not None:
        index = parse_index(Path(s["index"]).read_text("utf-8"))
        if index.fingerprint != fingerprint:
            raise RetrievalError(f"index {s['index']} was built with a different checkpoint")
    else:
        index = build_index(load_features(s["features"]), params)
    tree = (load_taxonomy(Path(s["taxonomy"]).read_text("utf-8")) if s["taxonomy"]
            else load_shipped_taxonomy())
    table = load_embeddings(s["embeddings"], s["embeddings2"])
    concepts = [c for c in s["concepts"].replace(",", " ").split()] or list(tree.concepts)
    make_query = expand_query if s["queries"] == "augmented" else label_query
    lists = [rank_shots(make_query(tree, cid), index, table, params, s["k"], s["fusion"])
             for cid in concepts]
    write_atomic(s["out"], format_run(lists, s["tag"]))
    inputs = {k: s[k] for k in ("checkpoint", "embeddings", "embeddings2", "taxonomy", "index",
                                "features")}
    _finish("retrieve", s, inputs, {"run": s["out"]}, fingerprint, args.started,
            _manifest_path(s, args.manifest, False))
    print(f"wrote {sum(len(r) for r in lists)} run lines for {len(lists)} concepts to {s['out']}")
    return EXIT_OK


def _load_run(path: str):
    runs = parse_run(Path(path).read_text("utf-8"))
    if not runs:
        raise RetrievalError(f"run file {path} is empty")
    return runs


def cmd_evaluate(s: dict, args) -> int:
    _require(s, "run", "qrels")
    if not s["epsilon"] > 0:
        raise ConfigError("epsilon must be positive")
    delimiter = {"text": None, "csv": ",", "tsv": "\t"}.get(s["format"], "?")
    if delimiter == "?":
        raise ConfigError(f"format must be text, csv or tsv, not {s['format']!r}")
    pool = parse_qrels(Path(s["qrels"]).read_text("utf-8"))
    scores = evaluate_runs(_load_run(s["run"]), pool, s["epsilon"])
    if s["compare"]:
        other = evaluate_runs(_load_run(s["compare"]), pool, s["epsilon"])
        names = (Path(s["run"]).stem, Path(s["compare"]).stem)
        report = format_comparison(scores, other, names, delimiter)
    else:
        report = format_report(scores, delimiter)
    sys.stdout.write(report)
    outputs = {}
    if s["out"]:
        write_atomic(s["out"], report)
        outputs["report"] = s["out"]
    _finish("evaluate", s, {k: s[k] for k in ("run", "qrels", "compare")}, outputs, None,
            args.started, _manifest_path(s, args.manifest, False))
    return EXIT_OK


def cmd_gradcheck(s: dict, args) -> int:
    err = end_to_end_gradcheck(seed=s["seed"])
    ok = err < s["tolerance"]
    print(f"max relative error {err:.3e} (tolerance {s['tolerance']:.0e}): "
          f"{'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "taxonomy-validate": (cmd_taxonomy_validate, "validate a concept taxonomy file"),
    "synth": (cmd_synth, "write a seeded synthetic corpus"),
    "train": (cmd_train, "train the dual encoders"),
    "index": (cmd_index, "encode shots into a text index"),
    "retrieve": (cmd_retrieve, "rank shots for concepts and write a run file"),
    "evaluate": (cmd_evaluate, "score run files with xinfAP"),
    "gradcheck": (cmd_gradcheck, "compare loss gradients against finite differences"),
}

# flags mapped straight onto settings keys
_FLAGS = {
    "taxonomy-validate": ["taxonomy", "extend"],
    "synth": ["out"],
    "train": ["features", "train_captions", "val_captions", "embeddings", "embeddings2", "out",
              "epochs", "learning_rate", "batch_size"],
    "index": ["checkpoint", "features", "out"],
    "retrieve": ["checkpoint", "embeddings", "embeddings2", "taxonomy", "index", "features",
                 "concepts", "fusion", "queries", "tag", "out"],
    "evaluate": ["run", "qrels", "compare", "format", "out"],
    "gradcheck": ["tolerance"],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--strict-repro", action="store_true",
                        help="single-threaded numerics for bitwise reproducibility")
    common.add_argument("--manifest", help="run manifest path (default next to the output)")

    parser = argparse.ArgumentParser(prog="conceptvid", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        for key in _FLAGS[name]:
            p.add_argument("--" + key.replace("_", "-"), dest=key)
        if name == "retrieve":
            p.add_argument("--k", type=int, dest="k")
        if name == "evaluate":
            p.add_argument("--epsilon", type=float, dest="epsilon")
    return parser


def _overrides(args) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    keys = list(_FLAGS[args.command]) + ["k", "epsilon"]
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if args.seed is not None:
        if "seed" not in SCHEMAS[args.command]:
            raise ConfigError(f"{args.command} takes no seed")
        out["seed"] = args.seed
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.started = time.time()
    try:
        file_values = read_config(args.config) if args.config else {}
        settings = resolve(args.command, file_values, _overrides(args))
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        limit = 1 if args.strict_repro else args.threads
        guard = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
        with guard:
            return COMMANDS[args.command][0](settings, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, TaxonomyError, EvaluationError, RetrievalError, EncodingError,
            TrainingError, UnicodeDecodeError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
