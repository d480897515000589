"""Metrics, the end-to-end detection pipeline and the experiment sweeps."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dataset import ALL_AREAS, LABELS, DatasetSplit, ImbalanceSpec, LabelBudget, build_splits, reveal_labels
from .forest import ForestConfig, RandomForest, fit_forest
from .grid import Trace, config_hash
from .model import LossSpec, PowerBertConfig, TrainConfig, encode, extract_features, pool, pretrain

log = logging.getLogger(__name__)

N_CLASSES = len(LABELS)
WINDOWS = (20, 40, 60, 80, 120)
THRESHOLDS = (2.0, 1.5, 1.2, 1.0, 0.8, 0.5)
AREA_MASKS = ((1,), (2,), (3,), (4,), (5,), (1, 3, 5), (1, 2, 3, 4, 5))
LOSSES = ("sme", "mae", "mse")
LABEL_RATES = (0.00002, 0.00008, 0.0002)
MODELS = ("raw-rf", "pb-rf")
EXPERIMENTS = ("window", "threshold", "spatial", "loss", "label-rate", "bench")


# -------------------------------------------------------------------- metrics

@dataclass
class ClassMetrics:
    precision: float
    recall: float
    support: int

    @property
    def paper_f1(self) -> float:
        """Arithmetic mean of precision and recall."""
        return 0.5 * (self.precision + self.recall)

    @property
    def harmonic_f1(self) -> float:
        s = self.precision + self.recall
        return 0.0 if s == 0 else 2 * self.precision * self.recall / s


def confusion_matrix(predictions, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    p = np.asarray(predictions, dtype=int)
    y = np.asarray(labels, dtype=int)
    if len(p) != len(y):
        raise ValueError("predictions and labels differ in length")
    if len(y) == 0:
        raise ValueError("no predictions to score")
    if min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= n_classes:
        raise ValueError(f"labels must be in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (y, p), 1)
    return cm


def class_metrics(cm: np.ndarray) -> list[ClassMetrics]:
    out = []
    for c in range(len(cm)):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out.append(ClassMetrics(float(prec), float(rec), int(cm[c].sum())))
    return out


def metrics(predictions, labels) -> tuple[np.ndarray, list[ClassMetrics]]:
    cm = confusion_matrix(predictions, labels)
    return cm, class_metrics(cm)


# ------------------------------------------------------------------- pipeline

@dataclass
class PipelineConfig:
    w1: float = 80
    stride: int = 5
    areas: tuple = ALL_AREAS
    fractions: tuple = (0.43, 0.07, 0.50)
    imbalance: ImbalanceSpec = field(default_factory=ImbalanceSpec)
    label: LabelBudget = field(default_factory=LabelBudget)
    dim: int = 32
    heads: int = 4
    ff_hidden: int = 64
    encoder_blocks: int = 3
    decoder_blocks: int = 2
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    pooling: str = "mean"
    features: str = "pb-rf"

    def model_config(self, ws: int) -> PowerBertConfig:
        return PowerBertConfig(ws, len(self.areas), self.dim, self.heads, self.encoder_blocks, self.decoder_blocks, self.ff_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["forest"].pop("workers", None)
        return d


@dataclass
class DetectionPipeline:
    """Trained artefacts needed to classify a raw segment."""

    forest: RandomForest
    params: dict | None = None
    model_cfg: PowerBertConfig | None = None
    pooling: str = "mean"

    def features(self, segments: np.ndarray) -> np.ndarray:
        if self.params is None:
            return segments.reshape(len(segments), -1)
        return extract_features(self.params, self.model_cfg, segments, self.pooling)

    def classify(self, segment: np.ndarray) -> int:
        if self.params is None:
            f = segment.reshape(1, -1)
        else:
            with T.no_grad():
                f = pool(encode(self.params, self.model_cfg, segment[None]).data, self.pooling)
        return int(np.argmax(self.forest.predict_proba(f)[0]))


@dataclass
class PipelineResult:
    confusion: np.ndarray
    classes: list[ClassMetrics]
    pipeline: DetectionPipeline
    split: DatasetSplit
    epoch_losses: list[float] = field(default_factory=list)


class PipelineCache:
    """Memoises splits and pretrained encoders inside one experiment."""

    def __init__(self):
        self.splits: dict = {}
        self.models: dict = {}

    def split(self, traces, cfg: PipelineConfig, seed: int) -> DatasetSplit:
        key = (cfg.w1, cfg.stride, tuple(cfg.areas), tuple(cfg.fractions), config_hash(asdict(cfg.imbalance)), seed)
        if key not in self.splits:
            self.splits[key] = build_splits(traces, cfg.w1, cfg.stride, cfg.areas, cfg.fractions, cfg.imbalance, seed)
        return self.splits[key]

    def model(self, split: DatasetSplit, cfg: PipelineConfig, seed: int):
        key = (id(split), cfg.dim, cfg.heads, cfg.ff_hidden, cfg.encoder_blocks, cfg.decoder_blocks,
               cfg.loss, config_hash(asdict(cfg.train)), seed)
        if key not in self.models:
            mcfg = cfg.model_config(split.train.values.shape[1])
            res = pretrain(split.train.values, mcfg, cfg.loss, cfg.train, seed)
            self.models[key] = (res.params, mcfg, res.epoch_losses)
        return self.models[key]


def run_pipeline(traces: Sequence[Trace], cfg: PipelineConfig, seed: int, cache: PipelineCache | None = None) -> PipelineResult:
    """split -> (pretrain -> features) -> reveal labels -> forest -> test metrics."""
    cache = cache or PipelineCache()
    split = cache.split(traces, cfg, seed)
    labelled = split.train.take(reveal_labels(split.train, cfg.label, seed))
    losses = []
    if cfg.features == "raw-rf":
        pipe = DetectionPipeline(forest=None)
    elif cfg.features == "pb-rf":
        params, mcfg, losses = cache.model(split, cfg, seed)
        pipe = DetectionPipeline(None, params, mcfg, cfg.pooling)
    else:
        raise ValueError(f"unknown feature source {cfg.features!r}")
    pipe.forest = fit_forest(pipe.features(labelled.values), labelled.labels, cfg.forest, seed)
    pred = pipe.forest.predict(pipe.features(split.test.values))
    cm, classes = metrics(pred, split.test.labels)
    return PipelineResult(cm, classes, pipe, split, losses)


# -------------------------------------------------------------------- reports

REPORT_COLUMNS = ["experiment", "configuration", "seed", "class", "precision", "recall", "paper_f1", "harmonic_f1", "support"]


@dataclass
class ExperimentReport:
    experiment: str
    configurations: list[str]
    seeds: list[int]
    results: dict = field(default_factory=dict)   # (configuration, seed) -> list[ClassMetrics]
    config_hash: str = ""
    runtime_s: float = 0.0
    extras: dict = field(default_factory=dict)

    def rows(self) -> list[list]:
        out = []
        for c in self.configurations:
            for s in self.seeds:
                for k, m in enumerate(self.results[(c, s)]):
                    out.append([self.experiment, c, s, LABELS[k], f"{m.precision:.6f}", f"{m.recall:.6f}",
                                f"{m.paper_f1:.6f}", f"{m.harmonic_f1:.6f}", m.support])
        return out

    def median(self, configuration: str, cls: int | str, metric: str = "paper_f1") -> float:
        k = LABELS.index(cls) if isinstance(cls, str) else cls
        return float(np.median([getattr(self.results[(configuration, s)][k], metric) for s in self.seeds]))

    def macro_median(self, configuration: str, metric: str = "paper_f1") -> float:
        per_seed = [np.mean([getattr(m, metric) for m in self.results[(configuration, s)]]) for s in self.seeds]
        return float(np.median(per_seed))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(self.rows())
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "configuration", "n_seeds", "config_hash"]
                   + [f"{l}_paper_f1_median" for l in LABELS]
                   + [f"{l}_harmonic_f1_median" for l in LABELS] + ["macro_paper_f1_median"])
        for c in self.configurations:
            w.writerow([self.experiment, c, len(self.seeds), self.config_hash]
                       + [f"{self.median(c, k):.6f}" for k in range(N_CLASSES)]
                       + [f"{self.median(c, k, 'harmonic_f1'):.6f}" for k in range(N_CLASSES)]
                       + [f"{self.macro_median(c):.6f}"])
        return buf.getvalue()


def _run_grid(name: str, traces, base: PipelineConfig, seeds, variants: list[tuple[str, Callable[[PipelineConfig], PipelineConfig]]],
              caches: dict | None = None) -> ExperimentReport:
    """Every variant for every seed.  ``caches`` (seed -> PipelineCache) lets
    several sweeps over the same traces share splits and pretrained models."""
    t0 = time.perf_counter()
    report = ExperimentReport(name, [label for label, _ in variants], list(seeds), config_hash=config_hash(base.to_dict()))
    caches = {} if caches is None else caches
    for seed in seeds:
        cache = caches.setdefault(seed, PipelineCache())
        for label, mutate in variants:
            res = run_pipeline(traces, mutate(base), seed, cache)
            report.results[(label, seed)] = res.classes
            log.info("%s %s seed=%d paper_f1=%s", name, label, seed, [round(m.paper_f1, 3) for m in res.classes])
    report.runtime_s = time.perf_counter() - t0
    return report


def run_window_sweep(traces, base: PipelineConfig, seeds, windows=WINDOWS, caches=None) -> ExperimentReport:
    for w in windows:
        if w % traces[0].slot_seconds:
            raise ValueError(f"window {w}s is not a multiple of the sample period")
    return _run_grid("window", traces, base, seeds, [(f"w1={w:g}s", lambda c, w=w: replace(c, w1=w)) for w in windows], caches)


def run_threshold_sweep(traces, base: PipelineConfig, seeds, thresholds=THRESHOLDS, caches=None) -> ExperimentReport:
    return _run_grid("threshold", traces, base, seeds,
                     [(f"k={k:g}", lambda c, k=k: replace(c, loss=LossSpec("sme", k))) for k in thresholds], caches)


def mask_label(mask) -> str:
    return "areas=" + "+".join(str(a) for a in mask)


def run_spatial_ablation(traces, base: PipelineConfig, seeds, masks=AREA_MASKS, caches=None) -> ExperimentReport:
    for m in masks:
        if not m or any(a < 1 or a > traces[0].area_count for a in m):
            raise ValueError(f"invalid area mask {m}")
    return _run_grid("spatial", traces, base, seeds,
                     [(mask_label(m), lambda c, m=m: replace(c, areas=tuple(m))) for m in masks], caches)


def run_loss_comparison(traces, base: PipelineConfig, seeds, losses=LOSSES, caches=None) -> ExperimentReport:
    return _run_grid("loss", traces, base, seeds,
                     [(l, lambda c, l=l: replace(c, loss=LossSpec(l, c.loss.k))) for l in losses], caches)


def run_label_rate_comparison(traces, base: PipelineConfig, seeds, rates=LABEL_RATES, models=MODELS, caches=None) -> ExperimentReport:
    variants = []
    for r in rates:
        for m in models:
            variants.append((f"rate={r * 100:g}%/{m}",
                             lambda c, r=r, m=m: replace(c, features=m, label=replace(c.label, rate=r))))
    return _run_grid("label-rate", traces, base, seeds, variants, caches)


@dataclass
class InferenceTiming:
    mean_s: float
    std_s: float
    n: int

    def to_csv(self) -> str:
        return f"metric,value\nmean_seconds_per_segment,{self.mean_s:.6e}\nstd_seconds,{self.std_s:.6e}\nsamples,{self.n}\n"


def measure_inference(pipeline: DetectionPipeline, segments: np.ndarray, n: int = 1000) -> InferenceTiming:
    """Wall-clock per single-segment classification (features + forest vote)."""
    if len(segments) == 0:
        raise ValueError("no segments to time")
    times = np.empty(n)
    pipeline.classify(segments[0])  # warm caches
    for i in range(n):
        seg = segments[i % len(segments)]
        t0 = time.perf_counter()
        pipeline.classify(seg)
        times[i] = time.perf_counter() - t0
    return InferenceTiming(float(times.mean()), float(times.std()), n)


def run_experiment(name: str, traces, base: PipelineConfig, seeds, caches=None) -> ExperimentReport:
    runners = {
        "window": run_window_sweep,
        "threshold": run_threshold_sweep,
        "spatial": run_spatial_ablation,
        "loss": run_loss_comparison,
        "label-rate": run_label_rate_comparison,
    }
    if name not in runners:
        raise ValueError(f"unknown experiment {name!r}; valid: {', '.join(EXPERIMENTS)}")
    return runners[name](traces, base, seeds, caches=caches)
