"""The ``vik`` command line: train, eval, gradcheck, flops, dump-phi, ablate.

Primary output (tables, accuracies) goes to stdout; logs go to stderr. Every
``VikError`` becomes its ``exit_code``; argparse usage errors exit 2.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .ablation import ARMS, run_ablation
from .bases import KanLayer, count_sign_changes, phi_curve_table, write_curve_csv
from .checkpoint import checkpoint_load
from .complexity import (
    COMPONENTS,
    count_mixer_flops,
    count_model_flops,
    instrumented_mixer_flops,
    instrumented_model_flops,
    linearity_sweep,
)
from .config import NUM_STAGES, PRESETS, VIK_LOG_LEVEL, RunConfig, TrainConfig, load_config
from .data import load_datasets
from .errors import CheckFailure, ConfigError, DataError, VikError
from .grad import DEFAULT_ATOL, DEFAULT_EPS, DEFAULT_TOL, GRADCHECK_SEED, LAYER_CHECKS, MAX_COORDS, check_layer, require_pass
from .storage import atomic_write_json, write_csv
from .train import evaluate, train_loop

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_CONFIG = "vik-tiny"
DEFAULT_FLOPS_CONFIG = "vik-small"
DEFAULT_RESOLUTIONS = "56,112,224"
DEFAULT_GRID = "-4,4,201"
DEFAULT_EDGES = "sample:32"


# --- helpers ---


def _load_run(source: str, seed: int | None) -> RunConfig:
    run = load_config(source)
    if seed is not None:
        run = run.model_copy(update={"seed": seed})
    return run


def _int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}", module="cli") from exc
    if not values:
        raise ConfigError(f"{what} is empty", module="cli")
    return values


def parse_grid(text: str) -> tuple[float, float, int]:
    parts = text.split(",")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"grid must be 'lo,hi,n', got {text!r}", module="cli") from exc
    if len(parts) != 3 or not lo < hi or n < 2:
        raise ConfigError(f"grid needs lo < hi and n >= 2, got {text!r}", module="cli")
    return lo, hi, n


def parse_selector(text: str, upper: int, what: str) -> list[int]:
    """``all`` or a 1-based index in ``1..upper``."""
    if text == "all":
        return list(range(1, upper + 1))
    try:
        value = int(text)
    except ValueError:
        value = 0
    if not 1 <= value <= upper:
        raise ConfigError(f"{what} {text!r} invalid; valid: all, 1..{upper}", module="cli")
    return [value]


def parse_edges(text: str, layer: KanLayer, rng: np.random.Generator, group: int = 0) -> list[tuple[int, int, int]]:
    """``sample:K`` draws K distinct (group, i, o) edges; ``i,j;k,l`` names edges of ``group`` explicitly."""
    f, g = layer.features, layer.groups
    if text.startswith("sample:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"edge spec {text!r}: sample count must be an integer", module="cli") from exc
        if k < 1:
            raise ConfigError(f"edge spec {text!r}: sample count must be positive", module="cli")
        total = g * f * f
        picks = np.sort(rng.choice(total, size=min(k, total), replace=False))
        return [tuple(int(v) for v in np.unravel_index(idx, (g, f, f))) for idx in picks]
    edges = []
    for pair in filter(None, (p.strip() for p in text.split(";"))):
        try:
            i, o = (int(v) for v in pair.split(","))
        except ValueError as exc:
            raise ConfigError(f"edge {pair!r} is not 'i,j'; use 'i,j;k,l' or 'sample:K'", module="cli") from exc
        layer.edge(i, o, group=group)  # raises with the valid ranges
        edges.append((group, i, o))
    if not edges:
        raise ConfigError(f"edge spec {text!r} selects nothing", module="cli")
    return edges


def _datasets_for(run: RunConfig, data: str):
    model = run.model
    return load_datasets(data, run.seed, run.train.synth, model.image_size, model.num_classes)


# --- subcommands ---


def cmd_train(args) -> int:
    run = _load_run(args.config, args.seed)
    train_set, val_set = _datasets_for(run, args.data)
    out = Path(args.out) if args.out else Path("runs") / run.model.name
    resume = checkpoint_load(Path(args.resume), expected=run.model) if args.resume else None
    result = train_loop(run, train_set, val_set, epochs=args.epochs, out_dir=out, data=args.data, resume=resume)
    last = result.history[-1]
    val = "-" if last.val_acc is None else f"{last.val_acc:.9g}"
    print(f"epoch {last.epoch} train_loss {last.train_loss:.9g} train_acc {last.train_acc:.9g} val_acc {val}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = checkpoint_load(Path(args.checkpoint))
    meta = ckpt.meta
    train_cfg = TrainConfig.model_validate(meta.get("train") or {})
    run = RunConfig(seed=int(meta.get("seed", 0)), model=ckpt.config, train=train_cfg)
    data = args.data or meta.get("data", "synth")
    train_set, val_set = _datasets_for(run, data)
    dataset = train_set if args.split == "train" else val_set
    if dataset is None:
        raise DataError(f"data {data!r} has no {args.split} split", module="cli")
    result = evaluate(ckpt.build_model(), dataset)
    print(f"{args.split} top1 {result.accuracy:.9g} ({result.correct}/{result.total}) loss {result.loss:.9g}")
    return 0


def _gradcheck_scope(scope: list[str]) -> list[str]:
    if scope == ["all"]:
        return list(LAYER_CHECKS)
    if len(scope) == 2 and scope[0] == "layer":
        if scope[1] not in LAYER_CHECKS:
            raise ConfigError(f"unknown layer {scope[1]!r}; choose from {', '.join(LAYER_CHECKS)}", module="cli")
        return [scope[1]]
    raise ConfigError(f"scope must be 'all' or 'layer NAME', got {' '.join(scope)!r}", module="cli")


def cmd_gradcheck(args) -> int:
    names = _gradcheck_scope(args.scope)
    run = load_config(args.config)
    reports = []
    for name in names:
        report = check_layer(name, eps=args.eps, tol=args.tol, atol=args.atol, max_coords=args.max_coords,
                             seed=args.seed, backbone_config=run.model)
        print(report.to_table())
        reports.append(report)
    require_pass(reports)
    print(f"all {sum(len(r.groups) for r in reports)} groups passed")
    return 0


def _model_table(report) -> list[list[str]]:
    rows = []
    for name in COMPONENTS:
        params = report.params.components.get(name, 0)
        flops = report.flops.components.get(name, 0)
        rows.append([name, str(params), str(flops)])
    rows.append(["total", str(report.params.total), str(report.flops.total)])
    return rows


def _compare_counts(label: str, analytic: dict[str, int], measured: dict[str, int]) -> bool:
    analytic = {k: v for k, v in analytic.items() if v}
    measured = {k: v for k, v in measured.items() if v}
    ok = True
    for name in sorted(set(analytic) | set(measured)):
        a, m = analytic.get(name, 0), measured.get(name, 0)
        ok &= a == m
        print(f"  {label:<12} {name:<15} analytic {a:>14d} measured {m:>14d} {'equal' if a == m else 'MISMATCH'}")
    return ok


def cmd_flops(args) -> int:
    run = load_config(args.config)
    config = run.model
    sides = _int_list(args.resolutions, "resolutions")
    if not 1 <= args.stage <= NUM_STAGES:
        raise ConfigError(f"stage {args.stage} invalid; valid: 1..{NUM_STAGES}", module="cli")

    report = count_model_flops(config)
    print(f"# {config.name} at {config.image_size[0]}x{config.image_size[1]}, {config.num_classes} classes")
    print(f"{'component':<15} {'params':>12} {'multiply-adds':>16}")
    for name, params, flops in _model_table(report):
        print(f"{name:<15} {int(params):>12,d} {int(flops):>16,d}")
    print(f"GMACs: {report.gmacs:.3f}")
    budget = report.budget()
    if budget is not None:
        params_ref, gflops_ref = budget
        print(f"published: {params_ref / 1e6:.1f}M params, {gflops_ref:.1f} GFLOPs; "
              f"ratio params {report.params.total / params_ref:.3f}, flops {report.gmacs / gflops_ref:.3f}")
        print("  caveat: counts are multiply-adds under the convention below; exp, GAP and residual "
              "conventions of published figures are unknown")
    print("convention: " + ", ".join(f"{k}={v}" for k, v in report.convention.items()))

    cfg = config.mixer_config(args.stage - 1)
    table = linearity_sweep(cfg, sides)
    header = ["side", "tokens", "mixer_flops", "per_token", "ratio"]
    if args.attention_reference:
        header.append("attention_flops")
    rows = []
    for row in table.rows:
        cells = [str(row.side), str(row.tokens), str(row.mixer_flops), f"{float(row.per_token):.9g}",
                 f"{float(row.ratio):.9g}"]
        if args.attention_reference:
            cells.append(str(row.attention_flops))
        rows.append(cells)
    print(f"\n# stage {args.stage} mixer (C={table.channels}, r={table.rank}) linearity: "
          f"{'linear' if table.is_linear else 'NOT linear'}")
    print("  ".join(f"{h:>15}" for h in header))
    for cells in rows:
        print("  ".join(f"{c:>15}" for c in cells))

    if args.out:
        out = Path(args.out)
        write_csv(out / "flops.csv", ("component", "params", "flops"), _model_table(report))
        write_csv(out / "linearity.csv", header, rows)
        logger.info("📄 reports written to %s", out)

    if args.instrumented:
        side = min(sides)
        print("\n# instrumented vs analytic")
        ok = _compare_counts(f"mixer@{side}", count_mixer_flops(cfg, side, side).components,
                             instrumented_mixer_flops(cfg, side, side, seed=run.seed))
        ok &= _compare_counts("model", report.flops.components, instrumented_model_flops(config, seed=run.seed))
        if not ok:
            raise CheckFailure("instrumented counts differ from the analytic model", module="cli")
    return 0


def cmd_dump_phi(args) -> int:
    ckpt = checkpoint_load(Path(args.checkpoint))
    grid = parse_grid(args.grid)
    model = ckpt.build_model()
    depths = [stage.depth for stage in ckpt.config.stages]
    stages = parse_selector(args.stage, len(depths), "stage")
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    curves = []
    for s in stages:
        for b in parse_selector(args.block, depths[s - 1], f"block of stage {s}"):
            kan = model.block(s, b).children["mixer"].children["kan"]
            if not isinstance(kan, KanLayer):
                raise ConfigError(f"{ckpt.config.basis.value} mixers have no univariate edge functions", module="cli")
            for g, i, o in parse_edges(args.edges, kan, rng, args.group):
                table = phi_curve_table(kan, (i, o), grid, group=g)
                name = f"s{s}_b{b}_g{g}_e{i}_{o}.csv"
                write_curve_csv(out / name, table)
                curves.append({
                    "file": name, "stage": s, "block": b, "group": g, "i": i, "o": o,
                    "sign_changes": count_sign_changes(table[:, 1]),
                    "phi_min": float(table[:, 1].min()), "phi_max": float(table[:, 1].max()),
                })
    means = {}
    for s in stages:
        counts = [c["sign_changes"] for c in curves if c["stage"] == s]
        means[str(s)] = sum(counts) / len(counts) if counts else None
    atomic_write_json(out / "manifest.json", {
        "checkpoint": str(args.checkpoint),
        "grid": {"lo": grid[0], "hi": grid[1], "n": grid[2]},
        "curves": curves,
        "stage_mean_sign_changes": means,
    })
    print(f"{len(curves)} curves written to {out}")
    for s, mean in means.items():
        print(f"stage {s}: mean sign changes {mean:.3f} over {sum(c['stage'] == int(s) for c in curves)} curves")
    first, last = means.get("1"), means.get(str(len(depths)))
    if first is not None and last is not None:
        verdict = "shallow more oscillatory" if first > last else "shallow not more oscillatory"
        print(f"stage 1 vs stage {len(depths)}: {first:.3f} vs {last:.3f} ({verdict})")
    return 0


def cmd_ablate(args) -> int:
    run = _load_run(args.config, args.seed)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()] if args.arms else list(ARMS)
    train_set, val_set = _datasets_for(run, args.data)
    out = Path(args.out) if args.out else Path("runs") / f"{run.model.name}-ablation"
    rows = run_ablation(run, train_set, val_set, arms, epochs=args.epochs, out_dir=out, data=args.data)
    print(f"{'arm':<10} {'params':>10} {'train_acc':>10} {'val_acc':>10}")
    for row in rows:
        val = "-" if row.val_acc is None else f"{row.val_acc:.4f}"
        print(f"{row.arm:<10} {row.params:>10d} {row.train_acc:>10.4f} {val:>10}")
    return 0


# --- parser ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vik",
        description="Attention-free KAN vision backbone: train, verify and inspect.",
        epilog=f"--config takes a JSON path or a preset: {', '.join(PRESETS)}. "
               "Negative grid bounds need the '=' form, e.g. --grid=-2,2,101.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch or resume", allow_abbrev=False)
    p.add_argument("--config", default=DEFAULT_TRAIN_CONFIG)
    p.add_argument("--data", default="synth", help="'synth' or 'cifar10:DIR'")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="run directory (default runs/<model name>)")
    p.add_argument("--resume", default=None, metavar="CHECKPOINT", help="continue from a checkpoint of this run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="defaults to the data the checkpoint was trained on")
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification", allow_abbrev=False)
    p.add_argument("--config", default=DEFAULT_TRAIN_CONFIG, help="model used by the 'backbone' check")
    p.add_argument("--scope", nargs="+", default=["all"], metavar="SCOPE", help="'all' or 'layer NAME'")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--atol", type=float, default=DEFAULT_ATOL)
    p.add_argument("--max-coords", type=int, default=MAX_COORDS)
    p.add_argument("--seed", type=int, default=GRADCHECK_SEED)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="analytic parameter and multiply-add report", allow_abbrev=False)
    p.add_argument("--config", default=DEFAULT_FLOPS_CONFIG)
    p.add_argument("--resolutions", default=DEFAULT_RESOLUTIONS, help="mixer feature-map sides to sweep")
    p.add_argument("--stage", type=int, default=1, help="whose mixer config the sweep uses")
    p.add_argument("--attention-reference", action="store_true")
    p.add_argument("--instrumented", action="store_true", help="also count by executing the model")
    p.add_argument("--out", default=None, help="directory for flops.csv and linearity.csv")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("dump-phi", help="export learned edge functions as CSV", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", default="all")
    p.add_argument("--block", default="all")
    p.add_argument("--edges", default=DEFAULT_EDGES, help="'i,j;k,l' or 'sample:K'")
    p.add_argument("--group", type=int, default=0, help="channel group for explicit edges")
    p.add_argument("--grid", default=DEFAULT_GRID, help="'lo,hi,n'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_phi)

    p = sub.add_parser("ablate", help="train the component ablation arms", allow_abbrev=False)
    p.add_argument("--config", default=DEFAULT_TRAIN_CONFIG)
    p.add_argument("--data", default="synth")
    p.add_argument("--arms", default=None, help=f"comma list from {','.join(ARMS)} (default all)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=VIK_LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except VikError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
