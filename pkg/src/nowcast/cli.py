"""Command line entry point: ``nowcast <command> [options]``.

Dataset roots hold one container per (region, year, split) at
``{root}/{year}/{region}.{split}.h5``; submissions use
``{dir}/{year}/{region}.pred.h5``. Every command writes a ``manifest.json``
into its output directory.

Exit codes: 0 success, 2 configuration error, 3 data or domain error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from nowcast.config import data_root, load_config, write_manifest
from nowcast.errors import ConfigurationError, DomainError, NowcastError

log = logging.getLogger("nowcast")

SPLITS = ("train", "val")


# ---------------------------------------------------------------------------
# dataset layout helpers


def dataset_path(root, region: str, year: int, split: str) -> Path:
    return Path(root) / str(year) / f"{region}.{split}.h5"


def find_datasets(root, split: str) -> list[Path]:
    root = Path(root)
    files = sorted(root.glob(f"*/*.{split}.h5"))
    if not files:
        raise DomainError(f"no '{split}' dataset files under {root}")
    return files


def load_split(root, split: str):
    from nowcast.data import read_container

    return [read_container(p) for p in find_datasets(root, split)]


def truth_submission(datasets, name: str = "ground truth"):
    from nowcast.ensemble import Submission

    cubes = {}
    for ds in datasets:
        for i in range(len(ds)):
            cubes[(ds.region_id, int(ds.year), i)] = ds.target(i)
    return Submission(name, cubes, frozenset(cubes))


def event_seed(seed: int, region_index: int, year: int, split: str) -> int:
    ss = np.random.SeedSequence([int(seed), region_index, int(year), SPLITS.index(split)])
    return int(ss.generate_state(1)[0])


def _set(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg.setdefault(section, {})[key] = value


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from nowcast.data import GridSpec, compute_climatology, store_climatology, synthesize_dataset, write_container

    started = _now()
    cfg, text = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _set(cfg, "data", "grid", args.grid)
    _set(cfg, "data", "regions", args.regions)
    _set(cfg, "data", "years", args.years)
    if args.train_samples is not None:
        cfg["data"]["samples"]["train"] = args.train_samples
    if args.val_samples is not None:
        cfg["data"]["samples"]["val"] = args.val_samples
    out = data_root(args.out)
    d = cfg["data"]
    grid = GridSpec.named(d["grid"]) if isinstance(d["grid"], str) else GridSpec(**d["grid"])
    samples = d["samples"]
    for split in samples:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}; expected one of {SPLITS}")
        if int(samples[split]) < 0:
            raise ConfigurationError(f"sample count for {split!r} must be >= 0")
    if not d["regions"] or not d["years"]:
        raise ConfigurationError("need at least one region and one year")

    outputs = []
    for ri, region in enumerate(d["regions"]):
        for year in d["years"]:
            for split in SPLITS:
                n = int(samples.get(split, 0))
                ds = synthesize_dataset(
                    n, grid, seed=event_seed(cfg["seed"], ri, year, split),
                    region_id=region, year=int(year), split=split,
                )
                path = write_container(dataset_path(out, region, year, split), ds)
                if n:
                    store_climatology(path, compute_climatology(ds))
                outputs.append(path)
                log.info("wrote %s (%d samples)", path, n)
    write_manifest(out, "synth", config_path=args.config, config=cfg, config_text=text,
                   seed=cfg["seed"], outputs=outputs, started=started)
    print(f"wrote {len(outputs)} dataset files to {out}")
    return 0


def _model_config(cfg: dict, grid):
    from nowcast.data import DESK_GRID
    from nowcast.models import BackboneConfig

    m = dict(cfg.get("model") or {})
    family = m.pop("family", "baseline")
    adapter = m.pop("adapter", "repeat_interleave")
    preset = m.pop("preset", "desk" if grid.side == DESK_GRID.side else "full")
    if preset == "desk":
        bcfg = BackboneConfig.desk(family, adapter, **m)
    elif preset == "full":
        bcfg = BackboneConfig.from_dict(dict(family=family, adapter=adapter, **m))
    else:
        raise ConfigurationError(f"model preset must be 'desk' or 'full', got {preset!r}")
    return bcfg.validate()


def cmd_train(args) -> int:
    from nowcast.data import MergedDataset
    from nowcast.losses import LossConfig, pos_weight_from_dataset
    from nowcast.models import build_model, save_checkpoint
    from nowcast.training import TrainConfig, select_checkpoint, train, write_metrics_csv

    started = _now()
    cfg, text = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key in ("family", "adapter"):
        _set(cfg, "model", key, getattr(args, key))
    for key in ("optimizer", "lr", "epochs", "batch_size", "max_steps"):
        _set(cfg, "train", key, getattr(args, key))
    if args.train_all:
        cfg["train"]["train_all"] = True
    _set(cfg, "loss", "kind", args.loss)

    root = data_root(args.data)
    train_parts = [ds for ds in load_split(root, "train") if len(ds)]
    if not train_parts:
        raise DomainError(f"all training files under {root} are empty")
    val_files = sorted(Path(root).glob("*/*.val.h5"))
    val_parts = [ds for ds in load_split(root, "val") if len(ds)] if val_files else []
    train_set = train_parts[0] if len(train_parts) == 1 else MergedDataset(train_parts)
    val_set = None
    if val_parts:
        val_set = val_parts[0] if len(val_parts) == 1 else MergedDataset(val_parts)

    loss_cfg = dict(cfg.get("loss") or {})
    unknown = set(loss_cfg) - set(LossConfig.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown loss config keys {sorted(unknown)}")
    if loss_cfg.get("pos_weight") == "auto":
        loss_cfg["pos_weight"] = pos_weight_from_dataset(train_set)
    tc = TrainConfig.from_dict(dict(cfg.get("train") or {}, seed=cfg["seed"], loss=LossConfig(**loss_cfg)))
    tc.validate()
    bcfg = _model_config(cfg, train_set.grid)
    model = build_model(bcfg, train_set.grid, seed=cfg["seed"])

    out = Path(args.out)
    result = train(model, train_set, tc, val_dataset=val_set)
    paths = []
    for ck in result.checkpoints:
        model.load_state_dict(ck.state_dict)
        paths.append(save_checkpoint(out / "checkpoints" / f"epoch_{ck.epoch:03d}.pt", model, ck.step,
                                     name=ck.name, epoch=ck.epoch))
    paths.append(write_metrics_csv(out / "metrics.csv", result.metrics))
    strategy = "best_val_iou" if val_set is not None and not tc.train_all else "last"
    selected = select_checkpoint(result.metrics, strategy) if result.metrics else 0
    summary = {
        "initial_loss": result.initial_loss,
        "first_step_loss": result.step_losses[0] if result.step_losses else None,
        "steps": len(result.step_losses),
        "skipped_steps": result.skipped_steps,
        "selected_epoch": selected,
        "selection_strategy": strategy,
        "selected_checkpoint": str(out / "checkpoints" / f"epoch_{selected:03d}.pt"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    paths.append(out / "summary.json")
    resolved = dict(cfg, model=bcfg.to_dict(), train=tc.to_dict())
    write_manifest(out, "train", config_path=args.config, config=resolved, config_text=text,
                   seed=cfg["seed"], inputs=[root], outputs=paths, started=started)
    print(f"epoch-0 loss {result.initial_loss:.6f}; selected epoch {selected} ({strategy})")
    return 0


def cmd_predict(args) -> int:
    from nowcast.data import load_climatology, read_container
    from nowcast.ensemble import Submission, write_submission
    from nowcast.models import load_checkpoint
    from nowcast.postprocess import apply_calibration, apply_threshold, build_calibration

    started = _now()
    model, _, extra = load_checkpoint(args.checkpoint)
    root = data_root(args.data)
    name = args.name or Path(args.checkpoint).resolve().parent.parent.name
    cubes = {}
    for path in find_datasets(root, args.split):
        ds = read_container(path)
        if ds.grid != model.grid:
            raise DomainError(f"{path} grid {ds.grid} does not match the checkpoint grid {model.grid}")
        mask = None
        if args.calibrate:
            tr = dataset_path(root, ds.region_id, ds.year, "train")
            va = dataset_path(root, ds.region_id, ds.year, "val")
            mask = build_calibration(load_climatology(tr, "train"), load_climatology(va, "val"),
                                     tuple(args.clip), args.calibrate)
        for i in range(len(ds)):
            probs = model.predict(ds[i][0]).probs.values
            if mask is not None:
                probs = apply_calibration(probs, mask)
            if args.threshold is not None:
                probs = apply_threshold(probs, args.threshold).values
            cubes[(ds.region_id, int(ds.year), i)] = probs
    sub = Submission(name, cubes)
    out = Path(args.out)
    paths = write_submission(out, sub, dtype=None if args.threshold is not None else "float16")
    write_manifest(out, "predict", config=vars_config(args), seed=None,
                   inputs=[args.checkpoint, root], outputs=paths, started=started)
    print(f"wrote {len(cubes)} cubes for {name!r} to {out}")
    return 0


def vars_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_eval(args) -> int:
    from nowcast.ensemble import read_submission, score_submission
    from nowcast.metrics import leaderboard, write_scores_csv

    started = _now()
    root = data_root(args.data)
    truth = truth_submission(load_split(root, args.split))
    sub = read_submission(args.pred, args.name, threshold=args.threshold)
    scores = score_submission(sub, truth, per_slot=args.per_slot)
    out = Path(args.out)
    path = write_scores_csv(out / "scores.csv", scores)
    for s in scores:
        print(f"{s.region_id}\t{s.year}\t{s.iou:.6f}")
    row = leaderboard(scores)[0]
    print(f"total mean {row.total_mean!r}")
    write_manifest(out, "eval", config=vars_config(args), inputs=[args.pred, root], outputs=[path], started=started)
    return 0


def cmd_sweep(args) -> int:
    from nowcast.ensemble import read_submission
    from nowcast.postprocess import DEFAULT_SWEEP, sweep_threshold

    started = _now()
    root = data_root(args.data)
    truth = truth_submission(load_split(root, args.split))
    sub = read_submission(args.pred)
    missing = sorted(set(truth.cubes) - set(sub.cubes))
    if missing:
        raise DomainError(f"predictions missing for {missing[:5]}")
    keys = sorted(truth.cubes)
    probs = [np.asarray(sub.cubes[k], np.float32) for k in keys]
    gts = [truth.cubes[k] for k in keys]
    best, curve = sweep_threshold(probs, gts, args.grid or DEFAULT_SWEEP)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "iou"])
        for tau, score in curve:
            w.writerow([tau, repr(score)])
    (out / "best.json").write_text(json.dumps({"threshold": best, "iou": dict(curve)[best]}, indent=2))
    print(f"best threshold {best} (IoU {dict(curve)[best]:.6f})")
    write_manifest(out, "sweep", config=vars_config(args), inputs=[args.pred, root],
                   outputs=[out / "sweep.csv", out / "best.json"], started=started)
    return 0


def cmd_ensemble(args) -> int:
    from nowcast.ensemble import PAPER_VOTE_MEMBERS, majority_vote, read_submission, write_submission

    started = _now()
    if args.preset == "paper-vote":
        if not args.root:
            raise ConfigurationError("--preset paper-vote needs --root holding one directory per member")
        inputs = [Path(args.root) / m for m in PAPER_VOTE_MEMBERS]
    else:
        inputs = [Path(p) for p in args.inputs or ()]
    if len(inputs) < 2:
        raise ConfigurationError("ensemble needs at least two --inputs (or --preset paper-vote)")
    for p in inputs:
        if not p.is_dir():
            raise DomainError(f"submission directory not found: {p}")
    subs = [read_submission(p, threshold=args.threshold) for p in inputs]
    voted = majority_vote(subs, args.tie_break, args.name)
    out = Path(args.out)
    paths = write_submission(out, voted)
    write_manifest(out, "ensemble", config=vars_config(args), inputs=inputs, outputs=paths, started=started)
    print(f"majority vote of {len(subs)} submissions -> {out}")
    return 0


def cmd_best_region(args) -> int:
    from nowcast.ensemble import best_per_region, read_submission, write_submission
    from nowcast.metrics import read_scores_csv

    started = _now()
    subs = [read_submission(p, threshold=args.threshold) for p in args.inputs]
    scores = [s for path in args.scores for s in read_scores_csv(path)]
    merged = best_per_region(subs, scores, args.name)
    out = Path(args.out)
    paths = write_submission(out, merged)
    with open(out / "sources.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["region_id", "year", "source"])
        for (region, year), src in sorted(merged.sources.items()):
            w.writerow([region, year, src])
    write_manifest(out, "best-region", config=vars_config(args), inputs=[*args.inputs, *args.scores],
                   outputs=[*paths, out / "sources.csv"], started=started)
    print(f"best-per-region submission -> {out}")
    return 0


def format_leaderboard(rows) -> str:
    years = sorted({y for r in rows for y in r.year_means})
    width = max([len("submission"), *(len(r.submission_name) for r in rows)])
    lines = ["  ".join([f"{'submission':<{width}}", f"{'total mean':<20}", *(f"{y:<20}" for y in years)]).rstrip()]
    for r in rows:
        cells = [f"{r.submission_name:<{width}}", f"{r.total_mean!r:<20}"]
        cells += [f"{r.year_means[y]!r:<20}" if y in r.year_means else f"{'-':<20}" for y in years]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def cmd_report(args) -> int:
    from nowcast.metrics import leaderboard, read_scores_csv

    started = _now()
    scores = [s for path in args.scores for s in read_scores_csv(path)]
    if not scores:
        raise DomainError("no scores to report")
    rows = leaderboard(scores)
    print(format_leaderboard(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        years = sorted({y for r in rows for y in r.year_means})
        with open(out / "leaderboard.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["submission_name", "total_mean", *years])
            for r in rows:
                w.writerow([r.submission_name, repr(r.total_mean), *(repr(r.year_means.get(y, "")) for y in years)])
        write_manifest(out, "report", config=vars_config(args), inputs=args.scores,
                       outputs=[out / "leaderboard.csv"], started=started)
    return 0


def cmd_plot(args) -> int:
    import h5py

    from nowcast.figures import plot_cube

    started = _now()
    pred = Path(args.pred)
    path = pred if pred.is_file() else pred / str(args.year) / f"{args.region}.pred.h5"
    if not path.exists():
        raise DomainError(f"no prediction for region {args.region!r} year {args.year} ({path} missing)")
    with h5py.File(path, "r") as f:
        if "submission" not in f:
            raise DomainError(f"{path} has no 'submission' dataset")
        data = f["submission"]
        if not 0 <= args.sample < data.shape[0]:
            raise DomainError(f"sample {args.sample} out of range [0, {data.shape[0]})")
        cube = data[args.sample].astype(np.float32)
    if args.threshold is not None:
        cube = (cube > args.threshold).astype(np.float32)
    out = Path(args.out)
    img = plot_cube(cube, out / f"{args.region}_{args.year}_{args.sample:03d}.png",
                    stride_hours=args.stride_hours, suptitle=f"{args.region} {args.year} #{args.sample}")
    write_manifest(out, "plot", config=vars_config(args), inputs=[path], outputs=[img], started=started)
    print(img)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--seed", type=int, help="seed for every random draw of the run")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nowcast", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic dataset files")
    s.add_argument("--out", help="dataset root (default: $NOWCAST_DATA_DIR)")
    s.add_argument("--grid", choices=("desk", "default", "full"))
    s.add_argument("--regions", nargs="+")
    s.add_argument("--years", nargs="+", type=int)
    s.add_argument("--train-samples", type=int)
    s.add_argument("--val-samples", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train one model")
    s.add_argument("--data", help="dataset root (default: $NOWCAST_DATA_DIR)")
    s.add_argument("--out", required=True)
    s.add_argument("--family", choices=("baseline", "vivit", "swin_unetr"))
    s.add_argument("--adapter", choices=("repeat_interleave", "channel_conv", "upsample_decoder"))
    s.add_argument("--optimizer", choices=("adamw", "adabelief"))
    s.add_argument("--loss", choices=("bce", "soft_iou", "dice", "focal", "dice_focal"))
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--train-all", action="store_true", help="also train on the validation split")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="write a submission from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--split", default="val")
    s.add_argument("--out", required=True)
    s.add_argument("--name")
    s.add_argument("--threshold", type=float, help="binarize; omit to keep probabilities")
    s.add_argument("--calibrate", choices=("ratio", "difference"))
    s.add_argument("--clip", type=float, nargs=2, default=(0.5, 2.0), metavar=("LO", "HI"))
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common], help="score a submission per region and year")
    s.add_argument("--pred", required=True)
    s.add_argument("--data")
    s.add_argument("--split", default="val")
    s.add_argument("--out", required=True)
    s.add_argument("--name")
    s.add_argument("--threshold", type=float, default=0.5, help="applied to probability submissions")
    s.add_argument("--per-slot", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="pick the best probability threshold")
    s.add_argument("--pred", required=True)
    s.add_argument("--data")
    s.add_argument("--split", default="val")
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=float, nargs="+")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ensemble", parents=[common], help="per-pixel majority vote")
    s.add_argument("--inputs", nargs="+")
    s.add_argument("--preset", choices=("paper-vote",))
    s.add_argument("--root", help="directory holding the preset's member submissions")
    s.add_argument("--tie-break", choices=("dry", "wet"), default="dry")
    s.add_argument("--threshold", type=float, default=0.5, help="applied to probability submissions")
    s.add_argument("--name", default="majority vote")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("best-region", parents=[common], help="best submission per region and year")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--scores", nargs="+", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--name", default="take best prediction per region")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_best_region)

    s = sub.add_parser("report", parents=[common], help="leaderboard from score files")
    s.add_argument("--scores", nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("plot", parents=[common], help="figure of one predicted cube")
    s.add_argument("--pred", required=True, help="submission directory or .pred.h5 file")
    s.add_argument("--region", required=True)
    s.add_argument("--year", type=int, required=True)
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--stride-hours", type=float, default=1.0)
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except NowcastError as exc:
        print(f"nowcast {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
