"""``pcad`` command line: gen, build, score, eval, ablate.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from pcad._threads import configure_numba
from pcad.config import DEFECT_KINDS, STAGES, RunConfig
from pcad.errors import DataError, InvariantError

log = logging.getLogger("pcad")

EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 2, 3, 4
GEN_PRIMITIVES = ("sphere", "torus", "washer", "cylinder", "plane")
STRATEGY_CHOICES = ("identity", "random", "greedy", "greedy-proj", "greedy_projected", "correspondence")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def effective_config(args) -> RunConfig:
    """Defaults, then ``--config`` file, then ``--set`` pairs, then dedicated flags."""
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    pairs = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for flag in ("stage", "strategy", "seed", "shots", "folds", "manifest", "out"):
        value = getattr(args, flag, None)
        if value is not None:
            pairs[flag] = str(value)
    if pairs.get("strategy") == "greedy-proj":
        pairs["strategy"] = "greedy_projected"
    return cfg.with_overrides(pairs)


def echo_config(cfg: RunConfig) -> None:
    print("# effective configuration")
    sys.stdout.write("".join(f"  {ln}\n" for ln in cfg.to_text().splitlines()))


def _require(value, flag):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from pcad.synth import EASY, HARD, ShapeSpec, SplitCounts, anomaly_ratios, gen_benchmark

    if not 1 <= args.categories <= len(GEN_PRIMITIVES):
        raise UsageError(f"--categories must lie in [1, {len(GEN_PRIMITIVES)}]")
    if args.normals < 2:
        raise UsageError("--normals must be >= 2 (split between train and test)")
    kinds = args.kinds.split(",")
    shapes = [ShapeSpec(p, args.points, args.noise) for p in GEN_PRIMITIVES[: args.categories]]
    counts = SplitCounts(args.normals - args.normals // 2, args.normals // 2, args.anomalies)
    out = Path(_require(args.out, "--out"))
    manifest = gen_benchmark(shapes, counts, kinds, out, args.seed, HARD if args.tier == "hard" else EASY)
    settings = {"categories": ",".join(s.category for s in shapes), "points": args.points, "noise": args.noise,
                "normals": args.normals, "anomalies": args.anomalies, "kinds": args.kinds,
                "tier": args.tier, "seed": args.seed}
    (out / "gen.cfg").write_text("".join(f"{k}={v}\n" for k, v in settings.items()))
    ratios = anomaly_ratios(manifest)
    print(f"wrote {len(manifest)} samples to {out / 'manifest.tsv'}")
    for cat in manifest.categories():
        vals = [ratios[r.sample_id] for r in manifest.select(category=cat, role="anomalous")]
        if vals:
            print(f"  {cat}: {len(manifest.select(category=cat))} samples, anomaly ratio "
                  f"{100 * min(vals):.2f}% .. {100 * max(vals):.2f}% (mean {100 * sum(vals) / len(vals):.2f}%)")
    return 0


def _load_manifest(cfg: RunConfig, args):
    from pcad.manifest import DatasetManifest

    manifest = DatasetManifest.read(_require(cfg.manifest, "--manifest"))
    manifest.validate()
    if getattr(args, "category", None):
        rows = manifest.select(category=args.category)
        if not rows:
            raise DataError(f"category {args.category!r} not in manifest")
        manifest = manifest.subset(rows)
    if getattr(args, "fold", None) is not None:
        from pcad.evaluate import make_openset_splits

        folds = make_openset_splits(manifest, cfg.seen_kinds, cfg.shots, args.fold + 1, cfg.seed)
        manifest = folds[args.fold]
    return manifest


def _bank_targets(out: Path, categories) -> dict[str, Path]:
    if len(categories) == 1 and out.suffix:
        return {categories[0]: out}
    return {c: out / f"{c}.pcad" for c in categories}


def cmd_build(args) -> int:
    from pcad.support import FeatureStore, build_supports, save_bank

    cfg = effective_config(args)
    echo_config(cfg)
    manifest = _load_manifest(cfg, args)
    out = Path(_require(cfg.out, "--out"))
    targets = _bank_targets(out, manifest.categories())
    store = FeatureStore(manifest)
    for cat, path in targets.items():
        ds = build_supports(manifest.subset(manifest.select(category=cat)), cfg, store)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_bank(ds, path)
        print(f"{cat}: bank {path} normal={len(ds.normal)} anomalous={len(ds.anomalous)} "
              f"removed_cor={ds.removed_cor} C1={ds.dim}")
    return 0


def _find_bank(bank: Path, cat: str) -> Path:
    if bank.is_dir():
        path = bank / f"{cat}.pcad"
        if not path.exists():
            raise DataError(f"no bank for category {cat!r} in {bank}")
        return path
    return bank


def cmd_score(args) -> int:
    from pcad.scoring import score_dataset, write_scores
    from pcad.support import FeatureStore, load_bank

    bank = Path(_require(args.bank, "--bank"))
    if not bank.exists():
        raise DataError(f"bank not found: {bank}")
    base = effective_config(args)
    manifest = _load_manifest(base, args)
    out = Path(_require(base.out, "--out"))
    store = FeatureStore(manifest)
    results = []
    for cat in manifest.categories():
        ds = load_bank(_find_bank(bank, cat))
        # bank settings first; anything given on the command line or in --config wins
        cfg = ds.cfg.with_overrides(_explicit(args, base))
        ds.cfg = cfg
        echo_config(cfg)
        results += score_dataset(manifest.subset(manifest.select(category=cat)), ds, cfg, store=store)
    write_scores(results, manifest, out)
    (out / "run.cfg").write_text(base.snapshot())
    print(f"scored {len(results)} samples into {out}")
    return 0


def _explicit(args, base: RunConfig) -> dict:
    """Config keys the user set explicitly (file, --set or flags)."""
    keys = set()
    if getattr(args, "config", None):
        keys |= _file_keys(args.config)
    keys |= {item.split("=", 1)[0].strip() for item in getattr(args, "set", None) or []}
    keys |= {f for f in ("stage", "strategy", "seed", "shots", "folds") if getattr(args, f, None) is not None}
    values = base.as_dict()
    return {k: values[k] for k in keys if k not in ("manifest", "out")}


def _file_keys(path) -> set[str]:
    keys = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        if "=" in line:
            keys.add(line.split("=", 1)[0].strip())
    return keys


def cmd_eval(args) -> int:
    from pcad.evaluate import emit_report, evaluate_run, make_openset_splits

    cfg = effective_config(args)
    echo_config(cfg)
    manifest = _load_manifest(cfg, args)
    folds = make_openset_splits(manifest, cfg.seen_kinds, cfg.shots, cfg.folds, cfg.seed)
    report = evaluate_run(folds, cfg)
    out = Path(_require(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, out / "report.tsv", "tsv")
    emit_report(report, out / "report.txt", "text")
    print((out / "report.txt").read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    from pcad.evaluate import emit_ablation, run_ablation

    cfg = effective_config(args)
    echo_config(cfg)
    manifest = _load_manifest(cfg, args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    report = run_ablation(manifest, cfg, cfg.folds, seeds)
    out = Path(_require(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    emit_ablation(report, out / "ablation.tsv")
    print(f"{'row':<4} {'stage':<5} {'strategy':<17} {'O-AUROC':>17} {'P-AUROC':>17}")
    for line in (out / "ablation.tsv").read_text().splitlines():
        if line.startswith(("#", "row\t")):
            continue
        row, stage, strat, om, osd, pm, psd = line.split("\t")[:7]
        print(f"{row:<4} {stage:<5} {strat:<17} {float(om):.4f} +/- {float(osd):.4f} {float(pm):.4f} +/- {float(psd):.4f}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_options(sp, fold=True):
        sp.add_argument("--manifest")
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--out")
        sp.add_argument("--stage", choices=STAGES)
        sp.add_argument("--strategy", choices=STRATEGY_CHOICES)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--category")
        sp.add_argument("--shots", type=int, choices=(5, 10))
        if fold:
            sp.add_argument("--fold", type=int, help="use open-set fold i of the manifest instead of its own split")

    g = sub.add_parser("gen", help="write a synthetic benchmark and its manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--categories", type=int, default=3)
    g.add_argument("--normals", type=int, default=20, help="normal samples per category (half train, half test)")
    g.add_argument("--anomalies", type=int, default=40, help="anomalous samples per category")
    g.add_argument("--kinds", default=",".join(DEFECT_KINDS))
    g.add_argument("--points", type=int, default=8000)
    g.add_argument("--noise", type=float, default=0.05, help="normal-direction noise in units of point spacing")
    g.add_argument("--tier", choices=("easy", "hard"), default="easy")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("build", help="build dual memory banks from a manifest's training rows")
    run_options(b)
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("score", help="score the test rows of a manifest against prebuilt banks")
    run_options(s)
    s.add_argument("--bank", required=True, help="bank file, or directory of <category>.pcad banks")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="open-set cross-validated evaluation")
    run_options(e, fold=False)
    e.add_argument("--folds", type=int)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="subsampling-strategy and stage ablation")
    run_options(a, fold=False)
    a.add_argument("--folds", type=int)
    a.add_argument("--seeds", type=int, default=5)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_numba()
    except ValueError as exc:
        print(f"pcad: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pcad {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"pcad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"pcad {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
