"""Command-line entry point: simulate, pretrain, evaluate, export-embeddings."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model as M
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config, validate
from .dataset import LABELS, DatasetSplit, Segments, build_splits, read_segment_store, reveal_labels, write_segment_store
from .evaluation import (
    EXPERIMENTS, DetectionPipeline, ExperimentReport, LABELS as CLASS_NAMES, measure_inference, run_experiment,
)
from .forest import fit_forest
from .grid import read_trace, simulate_corpus, write_trace

log = logging.getLogger("powerbert")

SPLITS = ("train", "validation", "test")


class CommandError(RuntimeError):
    """Expected failure: reported on stderr with a nonzero exit code."""


# ------------------------------------------------------------------- layout

class Layout:
    def __init__(self, out):
        self.root = Path(out)

    traces = property(lambda self: self.root / "traces")
    trace_index = property(lambda self: self.root / "traces" / "index.csv")
    segments_index = property(lambda self: self.root / "segments" / "index.json")
    checkpoint = property(lambda self: self.root / "model.ckpt")
    history = property(lambda self: self.root / "history.csv")
    reports = property(lambda self: self.root / "reports")

    def segment_store(self, split: str) -> Path:
        return self.root / "segments" / f"{split}.seg"


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text())


def _check_hash(found: str, expected: str, what: str) -> None:
    if found != expected:
        raise CommandError(f"{what} was produced by config hash {found}, current config expects {expected}; "
                           "rebuild it (--build) or use the matching config")


# ----------------------------------------------------------------- simulate

def do_simulate(cfg: RunConfig, lay: Layout) -> Path:
    traces = simulate_corpus(cfg.grid, cfg.simulate.counts(), cfg.seed, cfg.attack.options())
    lay.traces.mkdir(parents=True, exist_ok=True)
    for old in lay.traces.glob("trace_*"):
        old.unlink()
    h = cfg.stage_hash("simulate")
    rows = []
    for i, tr in enumerate(traces):
        name = f"trace_{i:05d}.csv"
        tr.meta["stage_hash"] = h
        write_trace(tr, lay.traces / name)
        rows.append([name, tr.attack_kind, tr.meta["seed"], tr.meta["attack_start"], tr.meta["bdd_alarms"]])
    with open(lay.trace_index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["# config_hash", h])
        w.writerow(["file", "attack_kind", "seed", "attack_start", "bdd_alarms"])
        w.writerows(rows)
    log.info("wrote %d traces to %s", len(traces), lay.traces)
    return lay.traces


def load_traces(cfg: RunConfig, lay: Layout, build: bool):
    if not lay.trace_index.exists():
        if not build:
            raise CommandError(f"no traces under {lay.traces}; run `simulate` first or pass --build")
        do_simulate(cfg, lay)
    with open(lay.trace_index, newline="") as fh:
        rows = list(csv.reader(fh))
    if build and rows[0][1] != cfg.stage_hash("simulate"):
        do_simulate(cfg, lay)
        return load_traces(cfg, lay, False)
    _check_hash(rows[0][1], cfg.stage_hash("simulate"), str(lay.trace_index))
    return [read_trace(lay.traces / r[0]) for r in rows[2:]]


# ----------------------------------------------------------------- segments

def build_segment_store(cfg: RunConfig, lay: Layout, build: bool) -> DatasetSplit:
    traces = load_traces(cfg, lay, build)
    p = cfg.pipeline()
    split = build_splits(traces, p.w1, p.stride, p.areas, p.fractions, p.imbalance, cfg.seed)
    h = cfg.stage_hash("dataset")
    lay.segments_index.parent.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_segment_store(lay.segment_store(name), getattr(split, name), p.areas, {"config_hash": h, "split": name})
    index = {
        "config_hash": h,
        "areas": list(p.areas),
        "scaler": {"x_min": split.scaler.x_min.tolist(), "x_max": split.scaler.x_max.tolist()},
        "trace_split": split.trace_split,
        "splits": {name: {"file": lay.segment_store(name).name, "ids": getattr(split, name).ids()} for name in SPLITS},
    }
    lay.segments_index.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return split


def load_segments(cfg: RunConfig, lay: Layout, build: bool) -> dict[str, Segments]:
    h = cfg.stage_hash("dataset")
    if not lay.segments_index.exists() or (build and _read_json(lay.segments_index)["config_hash"] != h):
        if not build and not lay.trace_index.exists():
            raise CommandError(f"no segment store under {lay.root / 'segments'} and no traces to build one from; "
                               "run `simulate` first or pass --build")
        build_segment_store(cfg, lay, build)
    _check_hash(_read_json(lay.segments_index)["config_hash"], h, str(lay.segments_index))
    # always read back from disk so fresh and reused stores give the same float32 values
    out = {}
    for name in SPLITS:
        segs, meta = read_segment_store(lay.segment_store(name))
        _check_hash(meta["meta"].get("config_hash"), h, str(lay.segment_store(name)))
        out[name] = segs
    return out


# ----------------------------------------------------------------- pretrain

HISTORY_COLUMNS = ["step", "lr", "loss", "small_mean", "large_mean", "large_fraction"]


def do_pretrain(cfg: RunConfig, lay: Layout, build: bool, resume: bool = False):
    segs = load_segments(cfg, lay, build)
    train = segs["train"].values
    h = cfg.stage_hash("model")
    params = adam = None
    mcfg = cfg.pipeline().model_config(train.shape[1])
    if resume:
        if not lay.checkpoint.exists():
            raise CommandError(f"--resume given but {lay.checkpoint} does not exist")
        params, mcfg_ck, adam, meta = M.load_model(lay.checkpoint)
        _check_hash(meta.get("config_hash"), h, str(lay.checkpoint))
        if mcfg_ck != mcfg:
            raise CommandError("checkpoint model shape differs from config")
    try:
        result = M.pretrain(train, mcfg, cfg.loss, cfg.train, cfg.seed, params=params, adam=adam,
                            validation=segs["validation"].values)
    except M.TrainingDiverged as exc:
        M.save_model(lay.checkpoint, exc.last_good, mcfg, None, {"config_hash": h, "diverged": True})
        raise CommandError(f"training diverged: {exc}; last good parameters saved to {lay.checkpoint}") from exc
    M.save_model(lay.checkpoint, result.params, mcfg, result.adam,
                 {"config_hash": h, "loss": cfg.loss.kind, "k": cfg.loss.k, "params_hash": M.params_hash(result.params)})
    mode = "a" if resume and lay.history.exists() else "w"
    with open(lay.history, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(["# config_hash", h])
            w.writerow(HISTORY_COLUMNS)
        for r in result.history:
            w.writerow([r.step, f"{r.lr:.8g}", f"{r.loss:.8g}", f"{r.small_mean:.8g}", f"{r.large_mean:.8g}", f"{r.large_fraction:.8g}"])
    if result.epoch_losses:
        log.info("epoch loss %.5f -> %.5f over %d steps", result.epoch_losses[0], result.epoch_losses[-1], result.adam.step_count)
    return result


def load_checkpoint_for(cfg: RunConfig, lay: Layout, build: bool, path=None):
    path = Path(path) if path else lay.checkpoint
    if not path.exists():
        if not build:
            raise CommandError(f"no checkpoint at {path}; run `pretrain` first or pass --build")
        do_pretrain(cfg, lay, build)
    params, mcfg, _, meta = M.load_model(path)
    if build and meta.get("config_hash") != cfg.stage_hash("model") and path == lay.checkpoint:
        do_pretrain(cfg, lay, build)
        params, mcfg, _, meta = M.load_model(path)
    _check_hash(meta.get("config_hash"), cfg.stage_hash("model"), str(path))
    return params, mcfg


# ----------------------------------------------------------------- evaluate

def write_report(report: ExperimentReport, lay: Layout, plot: bool) -> list[Path]:
    lay.reports.mkdir(parents=True, exist_ok=True)
    name = report.experiment
    paths = [lay.reports / f"{name}.csv", lay.reports / f"{name}_summary.csv"]
    paths[0].write_text(f"# config_hash,{report.config_hash}\n" + report.to_csv())
    paths[1].write_text(f"# config_hash,{report.config_hash}\n" + report.summary_csv())
    with open(lay.reports / f"{name}_runtime.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} experiment={name} seeds={report.seeds} runtime_s={report.runtime_s:.1f}\n")
    if plot:
        paths.append(plot_report(report, lay.reports / f"{name}.svg"))
    return paths


def plot_report(report: ExperimentReport, path: Path) -> Path:
    import matplotlib

    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = report.config_hash
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(report.configurations))
    for k, label in enumerate(CLASS_NAMES):
        ax.plot(x, [100 * report.median(c, k) for c in report.configurations], marker="o", label=label)
    ax.set_xticks(x, report.configurations, rotation=30, ha="right")
    ax.set_ylabel("median paper_f1 (%)")
    ax.set_title(f"{report.experiment} ({len(report.seeds)} seeds)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return path


def do_bench(cfg: RunConfig, lay: Layout, build: bool) -> Path:
    segs = load_segments(cfg, lay, build)
    params, mcfg = load_checkpoint_for(cfg, lay, build)
    pipe = DetectionPipeline(None, params, mcfg, cfg.model.pooling)
    labelled = segs["train"].take(reveal_labels(segs["train"], cfg.dataset.label, cfg.seed))
    pipe.forest = fit_forest(pipe.features(labelled.values), labelled.labels, cfg.pipeline().forest, cfg.seed)
    timing = measure_inference(pipe, segs["test"].values, cfg.experiment.inference_samples)
    lay.reports.mkdir(parents=True, exist_ok=True)
    path = lay.reports / "bench.csv"
    path.write_text(f"# config_hash,{cfg.stage_hash('model')}\n" + timing.to_csv())
    log.info("inference %.3e s per segment (std %.1e, n=%d)", timing.mean_s, timing.std_s, timing.n)
    return path


def do_evaluate(cfg: RunConfig, lay: Layout, name: str, build: bool) -> list[Path]:
    if name not in EXPERIMENTS:
        raise CommandError(f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}")
    if name == "bench":
        return [do_bench(cfg, lay, build)]
    traces = load_traces(cfg, lay, build)
    report = run_experiment(name, traces, cfg.pipeline(), cfg.eval_seeds)
    report.config_hash = replace(cfg, experiment=replace(cfg.experiment, name=name)).hash()
    return write_report(report, lay, cfg.experiment.plot)


# --------------------------------------------------------------- embeddings

def do_export(cfg: RunConfig, lay: Layout, split: str, checkpoint, count: int | None, build: bool) -> Path:
    if split not in SPLITS:
        raise CommandError(f"unknown split {split!r}; valid: {', '.join(SPLITS)}")
    segs = load_segments(cfg, lay, build)[split]
    params, mcfg = load_checkpoint_for(cfg, lay, build, checkpoint)
    if mcfg.ws != segs.values.shape[1] or mcfg.areas != segs.values.shape[2]:
        raise CommandError("checkpoint does not match the segment shape of the current config")
    count = count or cfg.experiment.embed_count
    rng = np.random.default_rng([cfg.seed, 31])
    per = count // len(LABELS)
    pick = []
    for c in range(len(LABELS)):
        pool = np.flatnonzero(segs.labels == c)
        want = per + (1 if c < count % len(LABELS) else 0)
        pick.append(rng.choice(pool, size=min(want, len(pool)), replace=False))
    idx = np.sort(np.concatenate(pick))
    if len(idx) < count:
        log.warning("only %d of %d requested segments available", len(idx), count)
    sub = segs.take(idx)
    feats = M.extract_features(params, mcfg, sub.values, cfg.model.pooling)
    lay.root.mkdir(parents=True, exist_ok=True)
    path = lay.root / f"embeddings_{split}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["# config_hash", cfg.stage_hash("model")])
        w.writerow(["segment_id", "label"] + [f"f{j}" for j in range(feats.shape[1])])
        for sid, lab, f in zip(sub.ids(), sub.labels, feats):
            w.writerow([sid, LABELS[int(lab)]] + [repr(float(v)) for v in f])
    return path


# --------------------------------------------------------------------- main

def parse_areas(text: str) -> tuple[int, ...]:
    try:
        areas = tuple(int(a) for a in text.replace("+", ",").split(",") if a.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad area mask {text!r}") from exc
    if not areas:
        raise argparse.ArgumentTypeError("empty area mask")
    return areas


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--loss", choices=M.LOSS_KINDS)
    common.add_argument("--k", type=float, help="SME threshold multiplier")
    common.add_argument("--w1", type=float, help="window width in seconds")
    common.add_argument("--label-rate", type=float)
    common.add_argument("--areas", type=parse_areas, help="area mask, e.g. 1,3,5")
    common.add_argument("--build", action="store_true", help="build missing upstream artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="powerbert", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate normal/FDIA/TDA traces")
    s.add_argument("--per-class", type=int, help="traces per class (overrides config counts)")
    t = sub.add_parser("pretrain", parents=[common], help="pretrain the autoencoder on the segment store")
    t.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    t.add_argument("--epochs", type=int)
    e = sub.add_parser("evaluate", parents=[common], help="run an experiment sweep")
    e.add_argument("experiment", help=f"one of: {', '.join(EXPERIMENTS)}")
    x = sub.add_parser("export-embeddings", parents=[common], help="write pooled representations to CSV")
    x.add_argument("--checkpoint")
    x.add_argument("--split", default="test")
    x.add_argument("--count", type=int)
    return p


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, seeds=None)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.loss is not None or args.k is not None:
        cfg = replace(cfg, loss=M.LossSpec(args.loss or cfg.loss.kind, cfg.loss.k if args.k is None else args.k))
    ds = cfg.dataset
    if args.w1 is not None:
        ds = replace(ds, w1=args.w1)
    if args.label_rate is not None:
        ds = replace(ds, label=replace(ds.label, rate=args.label_rate))
    if args.areas is not None:
        ds = replace(ds, areas=args.areas)
    cfg = replace(cfg, dataset=ds)
    if getattr(args, "per_class", None) is not None:
        n = args.per_class
        cfg = replace(cfg, simulate=replace(cfg.simulate, normal=n, fdia=n, tda=n))
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    return validate(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        lay = Layout(cfg.out)
        lay.root.mkdir(parents=True, exist_ok=True)
        (lay.root / "config.yaml").write_text(f"# config_hash: {cfg.hash()}\n" + dump_config(cfg))
        if args.command == "simulate":
            print(do_simulate(cfg, lay))
        elif args.command == "pretrain":
            do_pretrain(cfg, lay, args.build, args.resume)
            print(lay.checkpoint)
        elif args.command == "evaluate":
            for path in do_evaluate(cfg, lay, args.experiment, args.build):
                print(path)
        else:
            print(do_export(cfg, lay, args.split, args.checkpoint, args.count, args.build))
    except (ConfigError, CommandError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
