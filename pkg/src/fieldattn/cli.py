"""Command-line entry point: gen, bias-dump, train, eval, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    ConfigError,
    ConlluError,
    SyntheticConfig,
    TreeError,
    attach_candidates,
    generate_synthetic,
    parse_candidates,
    parse_conllu,
    sidecar_path,
    write_corpus,
)
from .field import BiasScope, RecoupleConfig, Strategy, bias_record
from .io import atomic_write_text, sha256_file
from .loss import Regularization
from .model import CheckpointError, dumps_checkpoint, loads_checkpoint
from .train import LADDER, TrainConfig, TrainingDiverged, ablation_csv, ablation_run, evaluate, num_labels_of, train_run

log = logging.getLogger("fieldattn")

STRATEGIES = [s.value for s in Strategy]
REGS = [r.value for r in Regularization]
SCOPES = [b.value for b in BiasScope]


class UsageError(Exception):
    """Bad input or arguments; maps to exit code 2."""


# ------------------------------------------------------------------ config


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment.

    A ``manifest.json`` from an earlier run is accepted too, in which case its
    resolved config snapshot is returned.
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{path}: config file not found")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: {exc.msg}") from None
        return {k: _format_value(v) for k, v in doc.get("config", doc).items()}
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = str
    try:
        # the format has no sections; parse it as one implicit section
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] - 1
        line = text.splitlines()[lineno - 1].strip()
        raise UsageError(f"{path}:{lineno}: cannot parse {line!r} (expected key = value)") from None
    except configparser.DuplicateOptionError as exc:
        raise UsageError(f"{path}:{exc.lineno - 1}: duplicate key {exc.option!r}") from None
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return dict(parser["run"])


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str):
    if text.strip().lower() in ("", "none"):
        return None
    return tuple(int(x) for x in text.split(",") if x.strip())


def _parse_floats(text: str):
    return tuple(float(x) for x in text.split(","))


def _converter(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


GEN_KEYS = {f.name: _converter(f.default) for f in dataclasses.fields(SyntheticConfig)} | {"seed": int}

TRAIN_KEYS = {
    "lr": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "split_ratios": _parse_floats,
    "train_fraction": float,
    "strategy": Strategy,
    "alpha": float,
    "beta": float,
    "bias_scope": BiasScope,
    "reg": Regularization,
    "weight_decay": float,
    "nll_weight": float,
    "wa_weight": float,
    "layers": int,
    "d_model": int,
    "heads": int,
    "d_ff": int,
    "max_length": int,
    "bias_layers": _parse_ints,
    "seeds": _parse_ints,
}


def resolve(raw: dict[str, str], schema: dict, source="config") -> dict:
    out = {}
    for key, text in raw.items():
        if key not in schema:
            raise UsageError(f"{source}: unknown key {key!r} (known: {', '.join(sorted(schema))})")
        try:
            out[key] = schema[key](text)
        except ValueError as exc:
            raise UsageError(f"{source}: bad value for {key!r}: {exc}") from None
    return out


def _flag_overrides(args, names) -> dict[str, str]:
    """CLI flags that were given, as config strings (flags win over the file)."""
    out = {}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = _format_value(value)
    return out


def train_config(values: dict) -> TrainConfig:
    values = dict(values)
    values.pop("seeds", None)
    recouple = RecoupleConfig(
        strategy=values.pop("strategy", Strategy.GAU),
        alpha=values.pop("alpha", 0.5),
        beta=values.pop("beta", 0.5),
        bias_scope=values.pop("bias_scope", BiasScope.CENTRAL_ROW),
    )
    reg = values.pop("reg", Regularization.NONE)
    try:
        return TrainConfig(recouple=recouple, regularization=reg, **values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def snapshot(cfg: TrainConfig) -> dict:
    """Flat resolved config, the same key space as the config file."""
    d = cfg.to_dict()
    rc = d.pop("recouple")
    d["strategy"], d["alpha"], d["beta"], d["bias_scope"] = rc["strategy"], rc["alpha"], rc["beta"], rc["bias_scope"]
    d["reg"] = d.pop("regularization")
    return d


# --------------------------------------------------------------- manifests


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": outputs,
        "version": __version__,
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(path, num_labels=None):
    path = Path(path)
    side = sidecar_path(path)
    for p in (path, side):
        if not p.exists():
            raise UsageError(f"{p}: no such file")
    try:
        sentences = parse_conllu(path.read_text(encoding="utf-8"))
    except ConlluError as exc:
        raise UsageError(f"{path}:{exc.line}: {exc.reason}") from None
    except TreeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    try:
        return attach_candidates(sentences, parse_candidates(side.read_text(encoding="utf-8")), num_labels)
    except ConlluError as exc:
        where = f"{side}:{exc.line}" if exc.line is not None else str(side)
        raise UsageError(f"{where}: {exc.reason}") from None
    except TreeError as exc:
        raise UsageError(f"{side}: {exc}") from None


def _corpus_inputs(path):
    return [Path(path), sidecar_path(path)]


# --------------------------------------------------------------- commands


def cmd_gen(args):
    raw = read_config(args.config) | _flag_overrides(args, ["seed"])
    values = resolve(raw, GEN_KEYS, args.config or "flags")
    seed = values.pop("seed", 0)
    cfg = SyntheticConfig(**values)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    corpus_path = out / "corpus.conllu"
    resolved = dataclasses.asdict(cfg) | {"seed": seed}
    write_manifest(out, "gen", resolved, seed, [], {"conllu": corpus_path.name, "candidates": sidecar_path(corpus_path).name})
    write_corpus(generate_synthetic(cfg, seed), corpus_path)
    print(f"wrote {corpus_path} and {sidecar_path(corpus_path)}")


def cmd_bias_dump(args):
    raw = read_config(args.config) | _flag_overrides(args, ["strategy", "bias_scope"])
    values = resolve(raw, TRAIN_KEYS, args.config or "flags")
    cfg = train_config(values).recouple
    corpus = load_corpus(args.corpus)
    records = [bias_record(s, c, cfg) for s in corpus for c in s.candidates]
    text = json.dumps(records) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote {len(records)} bias records to {args.out}")
    else:
        sys.stdout.write(text)


def _train_values(args):
    raw = read_config(args.config) | _flag_overrides(args, ["seed", "strategy", "reg", "bias_scope"])
    return resolve(raw, TRAIN_KEYS, args.config or "flags")


def cmd_train(args):
    cfg = train_config(_train_values(args))
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    outputs = {"checkpoint": "checkpoint.json", "history": "history.jsonl"}
    write_manifest(out, "train", snapshot(cfg), cfg.seed, _corpus_inputs(args.corpus), outputs)

    def progress(rec):
        log.info("epoch %d total %.4f dev_f1 %s", rec["epoch"], rec["total"], rec["dev_f1"])

    result = train_run(cfg, corpus, on_epoch=progress)
    extra = {"train_config": snapshot(cfg), "num_labels": result.params.config.num_labels}
    atomic_write_text(out / outputs["checkpoint"], dumps_checkpoint(result.params, extra))
    atomic_write_text(out / outputs["history"], "".join(json.dumps(h, sort_keys=True) + "\n" for h in result.history))
    last = result.history[-1] if result.history else {}
    print(f"trained {cfg.epochs} epochs; final total {last.get('total')}; wrote {out}")


def cmd_eval(args):
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"{path}: no such file")
    try:
        params, extra = loads_checkpoint(path.read_text(encoding="utf-8"))
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None
    stored = {k: _format_value(v) for k, v in extra.get("train_config", {}).items()}
    raw = stored | _flag_overrides(args, ["strategy", "reg", "bias_scope"])
    cfg = train_config(resolve(raw, TRAIN_KEYS, str(path)))
    corpus = load_corpus(args.corpus)
    need = num_labels_of(corpus)
    if need > params.config.num_labels:
        raise UsageError(
            f"{path}: label set mismatch: corpus uses label ids up to {need - 1}, "
            f"checkpoint was trained with {params.config.num_labels} labels"
        )
    result = evaluate(params, corpus, cfg.recouple, cfg.regularization)
    text = json.dumps(result.to_dict(), sort_keys=True)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")


def cmd_ablate(args):
    values = _train_values(args)
    seeds = list(values.get("seeds") or range(5))
    if args.seeds is not None:
        seeds = list(_parse_ints(args.seeds) or [])
    if not seeds:
        raise UsageError("need at least one seed")
    base = train_config(values)
    rungs = [
        r
        for r in LADDER
        if (args.strategy is None or r[1].value == args.strategy) and (args.reg is None or r[2].value == args.reg)
    ]
    if not rungs:
        raise UsageError("no ladder rung matches the --strategy/--reg filter")
    corpus = load_corpus(args.corpus)

    def progress(name, seed, ev):
        log.info("%s seed %d f1 %.4f", name, seed, ev.f1)

    rows, _ = ablation_run(base, corpus, seeds, rungs, on_run=progress)
    text = ablation_csv(rows)
    if args.out:
        out = Path(args.out)
        config = snapshot(base) | {"seeds": seeds}
        write_manifest(out.parent, "ablate", config, seeds, _corpus_inputs(args.corpus), {"table": out.name})
        atomic_write_text(out, text)
    sys.stdout.write(text)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fieldattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="flat key = value config file (or a manifest.json)")
        if "seed" in flags:
            sp.add_argument("--seed", type=int, help="overrides the config seed")
        if "strategy" in flags:
            sp.add_argument("--strategy", choices=STRATEGIES)
        if "reg" in flags:
            sp.add_argument("--reg", choices=REGS)
        if "bias_scope" in flags:
            sp.add_argument("--bias-scope", dest="bias_scope", choices=SCOPES)

    sp = sub.add_parser("gen", help="write a synthetic corpus")
    common(sp, "config", "seed")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("bias-dump", help="dump bias matrices for every candidate")
    sp.add_argument("corpus", help="CoNLL-U file with a .jsonl candidate sidecar")
    common(sp, "config", "strategy", "bias_scope")
    sp.add_argument("--out", help="output JSON file (default stdout)")
    sp.set_defaults(func=cmd_bias_dump)

    sp = sub.add_parser("train", help="train an encoder")
    sp.add_argument("corpus")
    common(sp, "config", "seed", "strategy", "reg", "bias_scope")
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("corpus")
    common(sp, "strategy", "reg", "bias_scope")
    sp.add_argument("--out", help="output JSON file")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the ablation ladder")
    sp.add_argument("corpus")
    common(sp, "config", "strategy", "reg", "bias_scope")
    sp.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    sp.add_argument("--out", help="output CSV file (default stdout only)")
    sp.set_defaults(func=cmd_ablate, seed=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
