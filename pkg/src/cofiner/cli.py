"""``cofiner`` command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.

Run directory layout (one directory per training run or suite)::

    config.snapshot      resolved config, data paths absolute
    run.json             plan hash, seed, checkpoint digests, test F1
    checkpoints/         step1.ckpt, coarse-<name>.ckpt, final.ckpt
    matrices/            <name>.tsv  (fine x coarse type-level F2C matrix)
    masks/               <name>.mask (consistency mask, one line per sentence)
    reports/             metrics.tsv, test.tsv, filtering-<name>.tsv, suite tables
    schemas/             fine.schema, <name>.schema
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .benchmark import make_benchmark
from .corpus import ConllParseError, SchemaError, read_conll, read_schema, run_kshot_sampler, write_conll, write_schema
from .evaluation import evaluate
from .experiments import kshot_curve, topk_sweep
from .f2c import ALL, format_matrix, read_matrix_tsv, write_matrix_tsv
from .filtering import filtering_report, read_mask, report_tsv, write_mask
from .model import load_checkpoint, save_checkpoint
from .trainer import ablation_tsv, metrics_tsv, run_ablation, run_pipeline

log = logging.getLogger("cofiner")

STAGES = {"start": "step-1 fine training", "step1": "coarse models, matrices and masks",
          "matrices": "joint training", "final": "artifact export"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _topk_list(s: str) -> list:
    out = []
    for x in s.split(","):
        x = x.strip().lower()
        if not x:
            continue
        if x == ALL:
            out.append(ALL)
        elif x.isdigit() and int(x) >= 1:
            out.append(int(x))
        else:
            raise argparse.ArgumentTypeError(f"top-k values are integers >= 1 or '{ALL}', got {x!r}")
    return out


def _topk_one(s: str):
    values = _topk_list(s)
    if len(values) != 1:
        raise argparse.ArgumentTypeError(f"expected a single top-k value, got {s!r}")
    return values[0]


def run_root() -> Path:
    return Path(os.environ.get("COFINER_RUN_DIR", "runs"))


@contextmanager
def atomic_dir(target: Path, force: bool):
    """Build a directory under a temporary name and move it into place on success."""
    target = Path(target)
    if target.exists() and not force:
        raise UsageError(f"run directory {target} exists; pass --force to replace it")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", suffix=".partial", dir=target.parent))
    try:
        for sub in ("checkpoints", "matrices", "masks", "reports", "schemas"):
            (tmp / sub).mkdir()
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def _config_from_args(args) -> tuple[dict, Path]:
    """Config file merged with flag overrides; returns (config, base dir for relative paths)."""
    if args.config is None:
        raise UsageError("--config is required")
    path = Path(args.config)
    try:
        cfg = cfgmod.load_config(path)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flag_keys = {
        "seed": "seed", "mode": "mode", "topk": "matrix.topk", "coarse_epochs": "coarse.epochs",
        "fine_epochs": "fine.epochs", "joint_epochs": "joint.epochs", "batch_size": "train.batch_size",
        "lr": "train.lr", "normalize": "loss.normalize",
    }
    for attr, key in flag_keys.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = str(v)
    for attr, key in {"fine_first": "joint.fine_first", "reset_optimizer": "joint.reset_optimizer",
                      "refilter_every_epoch": "joint.refilter_every_epoch",
                      "learnable_matrix": "matrix.learnable"}.items():
        if getattr(args, attr, False):
            overrides[key] = "true"
    cfg = cfgmod.merge(cfg, overrides)
    return cfgmod.absolutize(cfg, path.parent), path.parent


def _load_plan(cfg: dict):
    corpora = cfgmod.load_corpora(cfg)
    return cfgmod.plan_from_config(cfg, corpora), corpora


def _find_run(path: str) -> Path:
    run = Path(path)
    if not (run / "config.snapshot").is_file():
        alt = run_root() / path
        if (alt / "config.snapshot").is_file():
            return alt
        raise UsageError(f"{path} is not a run directory (no config.snapshot)")
    return run


def _names(run: Path, sub: str, suffix: str) -> list[str]:
    return sorted(p.name[: -len(suffix)] for p in (run / sub).glob(f"*{suffix}"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    corpus = read_conll(args.input)
    result = run_kshot_sampler(corpus, args.k, args.seed)
    write_conll(result.corpus, args.out)
    stats = Path(args.stats) if args.stats else Path(str(args.out) + ".stats")
    lines = [f"# k={args.k} seed={args.seed} sentences={len(result.corpus)} "
             f"termination={'normal' if result.normal else 'exhausted'}", "type\tcount\tstatus"]
    for name, count in result.counts.items():
        status = "exhausted" if name in result.exhausted else "ok"
        lines.append(f"{name}\t{count}\t{status}")
    stats.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(result.corpus)} sentences to {args.out}; stats in {stats}")
    return 0


def cmd_synth(args) -> int:
    """Write the standard synthetic benchmark as CoNLL files plus a ready config."""
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    bench = make_benchmark(args.seed, args.rho, args.k)
    write_conll(bench.pool, out / "fine-pool.conll")
    write_conll(bench.train, out / "fine-train.conll")
    write_conll(bench.dev, out / "fine-dev.conll")
    write_conll(bench.test, out / "fine-test.conll")
    write_conll(bench.coarse, out / "coarse.conll")
    write_schema(bench.train.schema, out / "fine.schema")
    (out / "hierarchy.tsv").write_text(
        "fine\tcoarse\n" + "".join(f"{f}\t{c}\n" for f, c in bench.hierarchy.items()), encoding="utf-8")
    conf = {"data.fine": "fine-train.conll", "data.fine_schema": "fine.schema", "data.coarse": "coarse.conll",
            "data.dev": "fine-dev.conll", "data.test": "fine-test.conll", "data.pool": "fine-pool.conll",
            "model.vocab_size": "2048",
            "train.log_dev": "false"}
    (out / "cofiner.conf").write_text(cfgmod.format_config(conf), encoding="utf-8")
    print(f"synthetic benchmark (seed {args.seed}, rho {args.rho}) written to {out}")
    return 0


def _export_run(tmp: Path, art, plan, cfg: dict) -> dict:
    manifest = {"plan_hash": art.plan_hash, "seed": art.seed, "mode": cfg.get("mode", "full"),
                "checkpoints": {}, "matrices": {}, "masks": {}}
    tag = f"plan={art.plan_hash} seed={art.seed}"
    (tmp / "config.snapshot").write_text(f"# {tag}\n" + cfgmod.format_config(cfg), encoding="utf-8")
    write_schema(plan.fine.schema, tmp / "schemas" / "fine.schema")
    step1_sha = save_checkpoint(art.step1.model, tmp / "checkpoints" / "step1.ckpt")
    manifest["checkpoints"]["step1"] = step1_sha
    for name, state in art.coarse_models.items():
        manifest["checkpoints"][f"coarse-{name}"] = save_checkpoint(
            state.model, tmp / "checkpoints" / f"coarse-{name}.ckpt")
    manifest["checkpoints"]["final"] = save_checkpoint(art.final.model, tmp / "checkpoints" / "final.ckpt")
    coarse_by_name = {c.name: c for c in plan.coarse}
    for name, M in art.matrices.items():
        write_matrix_tsv(M, tmp / "matrices" / f"{name}.tsv")
        write_schema(M.coarse_schema, tmp / "schemas" / f"{name}.schema")
        manifest["matrices"][name] = M.provenance
    for name, mask in art.masks.items():
        prov = ",".join(f"{k}:{v}" for k, v in sorted(art.matrices[name].provenance.items()))
        write_mask(mask, tmp / "masks" / f"{name}.mask", step1_sha, prov)
        rows = filtering_report(mask, coarse_by_name[name])
        (tmp / "reports" / f"filtering-{name}.tsv").write_text(report_tsv(rows), encoding="utf-8")
        manifest["masks"][name] = {"masked_fraction": mask.masked_fraction}
    (tmp / "reports" / "metrics.tsv").write_text(metrics_tsv(art.log), encoding="utf-8")
    if art.test_report is not None:
        (tmp / "reports" / "test.tsv").write_text(art.test_report.tsv(), encoding="utf-8")
        manifest["test_f1"] = art.test_report.f1
    (tmp / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def cmd_train(args) -> int:
    cfg, _ = _config_from_args(args)
    plan, _ = _load_plan(cfg)
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / f"{plan.digest()}-seed{plan.seed}"
    if run_dir.exists() and not args.force:
        raise UsageError(f"run directory {run_dir} exists; pass --force to replace it")
    done = ["start"]
    try:
        art = run_pipeline(plan, on_stage=lambda stage, _: done.append(stage))
    except Exception as exc:
        stage = "joint training" if plan.no_coarse and done[-1] == "step1" else STAGES[done[-1]]
        raise RuntimeError(f"stage '{stage}' failed: {exc}") from exc
    with atomic_dir(run_dir, args.force) as tmp:
        _export_run(tmp, art, plan, cfg)
    for name, mask in art.masks.items():
        print(f"{name}: {100 * mask.masked_fraction:.2f}% of coarse tokens filtered")
    if art.test_report is not None:
        print(art.test_report.table())
        print(f"test span F1: {art.test_report.f1:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_matrix(args) -> int:
    run = _find_run(args.run)
    names = [args.corpus] if args.corpus else _names(run, "matrices", ".tsv")
    if not names:
        raise RuntimeError(f"{run} has no matrices (was it trained with --mode no-coarse?)")
    for name in names:
        path = run / "matrices" / f"{name}.tsv"
        if not path.is_file():
            raise UsageError(f"no matrix named {name!r} in {run}")
        if args.print:
            print(path.read_text(encoding="utf-8"), end="")
        else:
            print(f"# {name}")
            print(format_matrix(read_matrix_tsv(path)))
    return 0


def _delta_f1(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if line.strip():
            name, value = line.split("\t")[:2]
            out[name] = float(value)
    return out


def cmd_audit(args) -> int:
    run = _find_run(args.run)
    cfg = cfgmod.load_config(run / "config.snapshot")
    coarse_paths = [Path(p.strip()) for p in cfg.get("data.coarse", "").split(",") if p.strip()]
    names = [args.corpus] if args.corpus else _names(run, "masks", ".mask")
    if not names:
        raise RuntimeError(f"{run} has no masks")
    delta = _delta_f1(args.delta_f1) if args.delta_f1 else None
    for name in names:
        mask_path = run / "masks" / f"{name}.mask"
        if not mask_path.is_file():
            raise UsageError(f"no mask named {name!r} in {run}")
        src = next((p for p in coarse_paths if p.stem == name), None)
        if src is None:
            raise RuntimeError(f"coarse corpus {name!r} is not listed in {run / 'config.snapshot'}")
        corpus = read_conll(src, read_schema(run / "schemas" / f"{name}.schema"), name)
        mask, header = read_mask(mask_path)
        text = report_tsv(filtering_report(mask, corpus), delta)
        (run / "reports" / f"audit-{name}.tsv").write_text(text, encoding="utf-8")
        print(f"# {name} {header.lstrip('# ')}")
        print(text, end="")
    return 0


def cmd_eval(args) -> int:
    run = _find_run(args.run)
    model = load_checkpoint(run / "checkpoints" / f"{args.checkpoint}.ckpt")
    M = None
    if args.matrix:
        mpath = run / "matrices" / f"{args.matrix}.tsv"
        if not mpath.is_file():
            raise UsageError(f"no matrix named {args.matrix!r} in {run}")
        M = read_matrix_tsv(mpath)
        schema = M.coarse_schema
    else:
        schema = read_schema(run / "schemas" / "fine.schema")
    if args.data:
        data = Path(args.data)
    else:
        cfg = cfgmod.load_config(run / "config.snapshot")
        if not cfg.get("data.test"):
            raise UsageError("no --data given and the run has no data.test")
        data = Path(cfg["data.test"])
    corpus = read_conll(data, schema)
    report = evaluate(model, corpus, M)
    print(report.table())
    out = Path(args.report_tsv) if args.report_tsv else run / "reports" / f"eval-{data.stem}.tsv"
    out.write_text(report.tsv(), encoding="utf-8")
    return 0


def cmd_suite(args) -> int:
    cfg, _ = _config_from_args(args)
    plan, corpora = _load_plan(replace_seed(cfg, args.seeds[0]))
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / f"suite-{args.suite}-{plan.digest()}"
    if run_dir.exists() and not args.force:
        raise UsageError(f"run directory {run_dir} exists; pass --force to replace it")
    if args.suite == "kshot":
        pool = corpora["pool"] or plan.fine
        table = kshot_curve(replace(plan, fine=pool), args.k, args.seeds, jobs=args.jobs)
        outputs = {"kshot.tsv": table.tsv()}
    elif args.suite == "topk":
        table = topk_sweep(plan, args.topk_values, args.seeds, jobs=args.jobs)
        outputs = {"topk.tsv": table.tsv(), "topk-summary.tsv": table.summary_tsv()}
    else:
        parts = []
        for seed in args.seeds:
            rows = run_ablation(replace(plan, seed=seed))
            text = ablation_tsv(rows).splitlines()
            if not parts:
                parts.append("seed\t" + text[0])
            parts += [f"{seed}\t{line}" for line in text[1:]]
        outputs = {"ablation.tsv": "\n".join(parts) + "\n"}
    with atomic_dir(run_dir, args.force) as tmp:
        (tmp / "config.snapshot").write_text(cfgmod.format_config(cfg), encoding="utf-8")
        for name, text in outputs.items():
            (tmp / "reports" / name).write_text(text, encoding="utf-8")
    for text in outputs.values():
        print(text, end="")
    print(f"run directory: {run_dir}")
    return 0


def replace_seed(cfg: dict, seed: int) -> dict:
    return {**cfg, "seed": str(seed)}


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p: argparse.ArgumentParser, seed_required: bool = True):
    p.add_argument("--config", required=True, help="flat key = value config file")
    if seed_required:
        p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=cfgmod.MODES)
    p.add_argument("--topk", type=_topk_one, help="top-k of the F2C matrix (integer or 'all')")
    p.add_argument("--coarse-epochs", type=int)
    p.add_argument("--fine-epochs", type=int)
    p.add_argument("--joint-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--normalize", choices=("tokens", "surviving"))
    p.add_argument("--fine-first", action="store_true", help="fine pass before coarse passes in each joint epoch")
    p.add_argument("--reset-optimizer", action="store_true", help="fresh optimizer state for joint training")
    p.add_argument("--refilter-every-epoch", action="store_true", help="recompute masks with the current model")
    p.add_argument("--learnable-matrix", action="store_true", help="train the F2C matrix through softmax logits")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--run-dir", help="output directory (default: $COFINER_RUN_DIR/<plan>-seed<seed>)")
    p.add_argument("--force", action="store_true", help="replace an existing run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cofiner", description="Coarse-to-fine few-shot NER pipeline.")
    parser.add_argument("--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="K~(K+5)-shot sample of a CoNLL corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", help="per-type count file (default: <out>.stats)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("synth", help="write the synthetic benchmark and a config for it")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rho", type=float, default=0.0, help="coarse label corruption rate")
    p.add_argument("--k", type=int, default=6, help="shots per fine type in fine-train.conll")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the full pipeline and export a run directory")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("matrix", help="show the F2C matrices of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--corpus", help="coarse corpus name (default: all)")
    p.add_argument("--print", action="store_true", help="raw TSV instead of the aligned table")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("audit", help="per coarse type share of filtered tokens")
    p.add_argument("--run", required=True)
    p.add_argument("--corpus")
    p.add_argument("--delta-f1", help="TSV (coarse_type, delta) to fill the delta_f1 column")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("eval", help="span-level P/R/F1 of a run's checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", default="final", help="checkpoint name under checkpoints/ (default: final)")
    p.add_argument("--data", help="CoNLL corpus (default: the run's data.test)")
    p.add_argument("--matrix", help="score a coarse corpus through this coarse corpus's F2C matrix")
    p.add_argument("--report-tsv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", help="experiment suites: kshot, topk, ablation")
    p.add_argument("suite", choices=("kshot", "topk", "ablation"))
    _add_training_flags(p, seed_required=False)
    p.add_argument("--seeds", type=_int_list, required=True, help="comma-separated seeds")
    p.add_argument("--k", type=_int_list, default=[10, 20, 40, 80, 100], help="shot counts (kshot)")
    p.add_argument("--topk-values", type=_topk_list, default=[1, 2, 3, ALL], help="k values (topk)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "suite" and not args.seeds:
            raise UsageError("--seeds needs at least one seed")
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"cofiner: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ConllParseError, SchemaError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"cofiner: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
