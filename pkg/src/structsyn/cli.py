"""Command-line entry point: ``structsyn <subcommand> [flags]``.

Subcommands: phantom, train, infer, eval, ablate, report. Exit status is 0
on success, 1 on usage errors and 2 on runtime failures. Relative ``--data``
and ``--out`` paths are resolved against ``$STRUCTSYN_DATA_ROOT`` and
``$STRUCTSYN_OUTPUT_ROOT`` when those are set. Every run writes
``manifest.json`` (argv, resolved config, seed, version) into its output
directory and refuses to reuse a non-empty directory without ``--force``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("structsyn")

DATA_ROOT_ENV = "STRUCTSYN_DATA_ROOT"
OUTPUT_ROOT_ENV = "STRUCTSYN_OUTPUT_ROOT"
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def package_version() -> str:
    """``git describe``-style version, falling back to the installed version."""
    try:
        from importlib.metadata import version
        base = version("structsyn")
    except Exception:
        base = "0+unknown"
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{base}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def _root(path: str, env: str) -> Path:
    p = Path(path).expanduser()
    if not p.is_absolute() and os.environ.get(env):
        p = Path(os.environ[env]) / p
    return p


def data_path(path: str) -> Path:
    return _root(path, DATA_ROOT_ENV)


def out_path(path: str) -> Path:
    return _root(path, OUTPUT_ROOT_ENV)


def claim_output(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise FileExistsError(f"{path} exists and is not empty; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir: Path, argv, command: str, seed, config: dict) -> Path:
    manifest = {"command": command, "argv": list(argv), "seed": seed, "config": config,
                "version": package_version()}
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def resolve_checkpoint(path: str) -> Path:
    p = out_path(path)
    for cand in (p, p.with_name(p.name + ".pt"), p / "last.pt"):
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"no checkpoint at {p}")


# --- subcommands -------------------------------------------------------------

def cmd_phantom(args, argv):
    from .dataset import write_record
    from .phantom import generate_phantom, random_config
    from .seeding import derive_seed

    out = claim_output(out_path(args.out), args.force)
    for i in range(args.count):
        cfg = random_config(derive_seed(args.seed, 0xDA7A, i), args.size, args.inconsistency,
                            noise_sigma=args.noise_sigma, mr_bias_field_amplitude=args.bias_field)
        write_record(out, f"sub{i:04d}", "s000", generate_phantom(cfg))
    write_manifest(out, argv, "phantom generate", args.seed,
                   {"count": args.count, "size": args.size, "inconsistency": args.inconsistency,
                    "noise_sigma": args.noise_sigma, "mr_bias_field_amplitude": args.bias_field})
    print(f"wrote {args.count} records to {out}")


def _load_records(data: Path, folds: int, fold, seed: int, part: str):
    from .dataset import load_dataset
    if fold is None:
        index = load_dataset(data, folds=1, seed=seed)
        return index.records
    index = load_dataset(data, folds=folds, seed=seed)
    train, test = index.split(fold)
    return train if part == "train" else test


def cmd_train(args, argv):
    from .training import TrainConfig, load_config, train

    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs), ("variant", args.variant),
                                   ("fold", args.fold)) if v is not None}
    data = data_path(args.data)
    out = out_path(args.out)
    d = config.to_dict()
    d.update(overrides, data_dir=str(data), out_dir=str(out))
    config = TrainConfig.from_dict(d)

    records = _load_records(data, config.folds, config.fold, config.seed, "train")
    pairs = [r.load() for r in records]
    if args.resume:
        ckpt = resolve_checkpoint(args.resume)
        bundle, entries = train(config, pairs, out_dir=out, resume_from=ckpt)
    else:
        claim_output(out, args.force)
        write_manifest(out, argv, "train", config.seed, config.to_dict())
        bundle, entries = train(config, pairs, out_dir=out)
    last = entries[-1].losses if entries else None
    print(f"trained {config.variant} for {bundle.epoch} epochs on {len(pairs)} slices -> {out / 'last.pt'}")
    if last is not None:
        print(f"final lambda*l_exc {last.lam * last.l_exc:.4f}")


def cmd_infer(args, argv):
    from .dataset import read_image, write_image, write_label
    from .training import ModelBundle, infer

    ckpt = resolve_checkpoint(args.checkpoint)
    bundle = ModelBundle.load(ckpt)
    mr = read_image(data_path(args.input))
    out = claim_output(out_path(args.out), args.force)
    synct, pred = infer(bundle, mr)
    stem = Path(args.input).name[: -len(".f32")] if args.input.endswith(".f32") else Path(args.input).stem
    write_image(out / f"{stem}_synct.f32", synct)
    write_label(out / f"{stem}_pred_label.u8", pred)
    write_manifest(out, argv, "infer", bundle.config.seed, {"checkpoint": str(ckpt), "input": args.input,
                                                             "train_config": bundle.config.to_dict()})
    print(f"wrote {out / (stem + '_synct.f32')}")


def cmd_eval(args, argv):
    from .evaluation import emit_report, evaluate
    from .training import ModelBundle

    ckpt = resolve_checkpoint(args.checkpoint)
    bundle = ModelBundle.load(ckpt)
    cfg = bundle.config
    fold = args.fold if args.fold is not None else cfg.fold
    data = data_path(args.data)
    if args.split == "all" or fold is None:
        records = _load_records(data, cfg.folds, None, cfg.seed, "test")
    else:
        records = _load_records(data, cfg.folds, fold, cfg.seed, args.split)
    out = claim_output(out_path(args.out) if args.out else ckpt.parent / "eval", args.force)
    label = args.label or cfg.variant
    report = evaluate(bundle, records, label=label, plots_dir=out / "plots" if args.plots else None)
    paths = emit_report({label: report}, out)
    write_manifest(out, argv, "eval", cfg.seed, {"checkpoint": str(ckpt), "data": str(data), "split": args.split,
                                                 "fold": fold, "train_config": cfg.to_dict()})
    if args.json:
        print(json.dumps({label: report.to_dict()}))
    else:
        print(paths["table"].read_text(), end="")
        print(f"report: {paths['json']}")


def cmd_ablate(args, argv):
    from .ablation import run_ablation, summary_table

    out = claim_output(out_path(args.out), args.force)
    seeds = [args.seed + k for k in range(args.seeds)]
    config = {"variants": args.variants, "seeds": seeds, "epochs": args.epochs, "n_train": args.n_train,
              "n_test": args.n_test, "size": args.size, "base_channels": args.base_channels}
    write_manifest(out, argv, "ablate", args.seed, config)
    results = run_ablation(args.variants, seeds, epochs=args.epochs, n_train=args.n_train, n_test=args.n_test,
                           size=args.size, base_channels=args.base_channels)
    rows = [r.summary() for r in results.values()]
    (out / "summary.json").write_text(json.dumps(rows, indent=2))
    table = summary_table(results)
    (out / "table.txt").write_text(table)
    print(table, end="")


def cmd_report(args, argv):
    from .evaluation import emit_report, read_reports

    reports = {}
    for path in args.inputs:
        for name, rep in read_reports(out_path(path)).items():
            key, k = name, 2
            while key in reports:
                key, k = f"{name}_{k}", k + 1
            reports[key] = rep
    out = claim_output(out_path(args.out), args.force)
    paths = emit_report(reports, out)
    write_manifest(out, argv, "report", None, {"inputs": args.inputs})
    print(paths["table"].read_text(), end="")


# --- parser ------------------------------------------------------------------

def build_parser() -> _Parser:
    from .phantom import INCONSISTENCY_MODES
    from .training import VARIANTS

    p = _Parser(prog="structsyn", description="Structure-aware MR-to-CT translation on phantoms.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="{phantom,train,infer,eval,ablate,report}", parser_class=_Parser)
    sub.required = True

    ph = sub.add_parser("phantom", help="generate phantom datasets")
    phs = ph.add_subparsers(dest="action", metavar="{generate}", parser_class=_Parser)
    phs.required = True
    g = phs.add_parser("generate", help="write random MR/CT phantom records")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inconsistency", choices=INCONSISTENCY_MODES, default="random")
    g.add_argument("--noise-sigma", type=float, default=0.01)
    g.add_argument("--bias-field", type=float, default=0.1)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_phantom)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON or TOML training config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--fold", type=int, help="hold out this fold; default trains on every record")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint in --out")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="translate one MR raster")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="MR raster (*.f32 with JSON sidecar)")
    i.add_argument("--out", required=True)
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--fold", type=int)
    e.add_argument("--out", help="default: <checkpoint dir>/eval")
    e.add_argument("--label")
    e.add_argument("--plots", action="store_true", help="save per-slice comparison figures")
    e.add_argument("--json", action="store_true", help="print the report as JSON")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare variants on phantoms")
    a.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    a.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs", type=int, default=30)
    a.add_argument("--n-train", type=int, default=16)
    a.add_argument("--n-test", type=int, default=8)
    a.add_argument("--size", type=int, default=64)
    a.add_argument("--base-channels", type=int, default=8)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="merge evaluation reports into tables")
    r.add_argument("--inputs", nargs="+", required=True, help="report.json files")
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        args.func(args, argv)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"structsyn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
