"""From traces to normalised, windowed, labelled segments and imbalanced splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import Trace

LABELS = ("normal", "tda", "fdia")
NORMAL, TDA, FDIA = 0, 1, 2
LABEL_OF_KIND = {"none": NORMAL, "tda": TDA, "fdia": FDIA}
ALL_AREAS = (1, 2, 3, 4, 5)


class CompositionError(ValueError):
    pass


@dataclass
class Scaler:
    areas: tuple[int, ...]
    x_min: np.ndarray
    x_max: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.x_max == self.x_min


def _channels(trace: Trace, areas: Sequence[int]) -> np.ndarray:
    idx = [a - 1 for a in areas]
    if min(idx) < 0 or max(idx) >= trace.area_count:
        raise ValueError(f"area mask {tuple(areas)} outside 1..{trace.area_count}")
    return trace.ace[:, idx]


def fit_scaler(traces: Sequence[Trace], areas: Sequence[int] = ALL_AREAS) -> Scaler:
    if not traces:
        raise ValueError("fit_scaler needs at least one trace")
    areas = tuple(areas)
    lo = np.min([_channels(t, areas).min(axis=0) for t in traces], axis=0)
    hi = np.max([_channels(t, areas).max(axis=0) for t in traces], axis=0)
    return Scaler(areas, lo, hi)


def transform(scaler: Scaler, trace: Trace) -> np.ndarray:
    """Min-max map per channel.  Out-of-range values are not clipped;
    degenerate channels map to 0."""
    x = _channels(trace, scaler.areas)
    span = scaler.x_max - scaler.x_min
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - scaler.x_min) / safe, 0.0)


@dataclass
class Segments:
    values: np.ndarray      # (N, ws, A)
    labels: np.ndarray      # (N,)
    trace_ids: np.ndarray   # (N,)
    starts: np.ndarray      # (N,)

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Segments":
        idx = np.asarray(idx, dtype=int)
        return Segments(self.values[idx], self.labels[idx], self.trace_ids[idx], self.starts[idx])

    def ids(self) -> list[str]:
        return [f"{t}:{s}" for t, s in zip(self.trace_ids, self.starts)]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(LABELS))

    def flat(self) -> np.ndarray:
        return self.values.reshape(len(self), -1)

    @staticmethod
    def concat(parts: Sequence["Segments"], ws: int, width: int) -> "Segments":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Segments(np.zeros((0, ws, width)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
        return Segments(
            np.concatenate([p.values for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.trace_ids for p in parts]),
            np.concatenate([p.starts for p in parts]),
        )


def window_samples(w1: float, slot_seconds: float = 4.0) -> int:
    ws = w1 / slot_seconds
    if w1 <= 0 or ws != int(ws):
        raise ValueError(f"window {w1}s is not a positive multiple of the {slot_seconds}s sample period")
    return int(ws)


def segment_count(length: int, ws: int, stride: int) -> int:
    return 0 if length < ws else (length - ws) // stride + 1


def extract_segments(
    trace: Trace,
    w1: float,
    stride: int = 5,
    areas: Sequence[int] = ALL_AREAS,
    scaler: Scaler | None = None,
    trace_id: int = 0,
) -> Segments:
    """Sliding windows at offsets 0, stride, 2*stride, ...

    A window is labelled with the trace's attack kind when any of its slots is
    under attack, otherwise normal.
    """
    ws = window_samples(w1, trace.slot_seconds)
    if ws > trace.length:
        raise ValueError(f"window of {ws} samples exceeds trace length {trace.length}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    x = transform(scaler, trace) if scaler is not None else _channels(trace, areas)
    offsets = np.arange(segment_count(trace.length, ws, stride)) * stride
    windows = np.lib.stride_tricks.sliding_window_view(x, ws, axis=0)[offsets]  # (n, A, ws)
    hit = np.lib.stride_tricks.sliding_window_view(trace.active, ws)[offsets].any(axis=1)
    labels = np.where(hit, LABEL_OF_KIND[trace.attack_kind], NORMAL)
    return Segments(
        np.ascontiguousarray(windows.transpose(0, 2, 1)),
        labels.astype(int),
        np.full(len(offsets), trace_id),
        offsets.astype(int),
    )


# --------------------------------------------------------------------- splits

@dataclass
class ImbalanceSpec:
    """Train/validation composition: every attack class is ``attack_fraction``
    of the split, but never fewer than ``min_attack_per_class`` segments."""

    attack_fraction: float = 0.0001
    min_attack_per_class: int = 10


@dataclass
class DatasetSplit:
    train: Segments
    validation: Segments
    test: Segments
    scaler: Scaler
    trace_split: dict[str, list[int]] = field(default_factory=dict)

    def counts(self) -> dict[str, list[int]]:
        return {name: getattr(self, name).class_counts().tolist() for name in ("train", "validation", "test")}


def split_traces(traces: Sequence[Trace], fractions=(0.43, 0.07, 0.50), seed: int = 0) -> dict[str, list[int]]:
    """Trace-level split.  Classes are interleaved before cutting so every
    split sees every class in roughly equal measure."""
    if not np.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng([seed, 11])
    by_kind: dict[str, list[int]] = {}
    for i, t in enumerate(traces):
        by_kind.setdefault(t.attack_kind, []).append(i)
    queues = [list(rng.permutation(by_kind[k])) for k in sorted(by_kind)]
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(int(q.pop()))
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": order[:n_train],
        "validation": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }


def attack_quota(n_normal: int, spec: ImbalanceSpec) -> int:
    f = spec.attack_fraction
    return max(spec.min_attack_per_class, int(round(f * n_normal / (1.0 - 2.0 * f))))


def compose_imbalanced(segs: Segments, spec: ImbalanceSpec, rng: np.random.Generator, split: str = "train") -> Segments:
    counts = segs.class_counts()
    quota = attack_quota(int(counts[NORMAL]), spec)
    short = {LABELS[c]: int(counts[c]) for c in (TDA, FDIA) if counts[c] < quota}
    if short:
        raise CompositionError(
            f"{split}: need {quota} segments per attack class, have {short}"
        )
    keep = [np.flatnonzero(segs.labels == NORMAL)]
    for c in (TDA, FDIA):
        keep.append(rng.choice(np.flatnonzero(segs.labels == c), size=quota, replace=False))
    return segs.take(np.sort(np.concatenate(keep)))


def balance(segs: Segments, rng: np.random.Generator) -> Segments:
    n = int(segs.class_counts().min())
    keep = [rng.choice(np.flatnonzero(segs.labels == c), size=n, replace=False) for c in range(len(LABELS))]
    return segs.take(np.sort(np.concatenate(keep)))


def build_splits(
    traces: Sequence[Trace],
    w1: float = 80,
    stride: int = 5,
    areas: Sequence[int] = ALL_AREAS,
    fractions=(0.43, 0.07, 0.50),
    imbalance: ImbalanceSpec | None = None,
    seed: int = 0,
) -> DatasetSplit:
    imbalance = imbalance or ImbalanceSpec()
    parts = split_traces(traces, fractions, seed)
    # Scale to the range of normal operation; attack excursions extrapolate.
    train_traces = [traces[i] for i in parts["train"]]
    reference = [t for t in train_traces if t.attack_kind == "none"] or train_traces
    scaler = fit_scaler(reference, areas)
    ws = window_samples(w1, traces[0].slot_seconds)

    def segments(ids):
        return Segments.concat(
            [extract_segments(traces[i], w1, stride, areas, scaler, trace_id=i) for i in sorted(ids)],
            ws, len(areas),
        )

    rng = np.random.default_rng([seed, 12])
    train = compose_imbalanced(segments(parts["train"]), imbalance, rng, "train")
    validation = compose_imbalanced(segments(parts["validation"]), imbalance, rng, "validation")
    test = balance(segments(parts["test"]), rng)
    return DatasetSplit(train, validation, test, scaler, parts)


# --------------------------------------------------------------------- labels

@dataclass
class LabelBudget:
    rate: float = 0.00002
    min_per_class: int = 5

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ValueError("labeling rate must be in (0, 1]")
        if self.min_per_class < 1:
            raise ValueError("min_per_class must be >= 1")


def label_quotas(counts: Sequence[int], budget: LabelBudget) -> np.ndarray:
    """Per-class number of revealed labels: proportional to class size with a
    per-class floor; the floor is paid for by the largest class."""
    counts = np.asarray(counts, dtype=int)
    n = int(counts.sum())
    if n < len(counts) * budget.min_per_class:
        raise CompositionError(f"{n} segments cannot supply {budget.min_per_class} labels for each of {len(counts)} classes")
    total = max(int(round(budget.rate * n)), len(counts) * budget.min_per_class)
    exact = counts * total / n
    quota = np.floor(exact).astype(int)
    for c in np.argsort(-(exact - quota), kind="stable")[: total - quota.sum()]:
        quota[c] += 1
    quota = np.maximum(quota, budget.min_per_class)
    excess = quota.sum() - total
    for c in np.argsort(-quota, kind="stable"):
        if excess <= 0:
            break
        give = min(excess, quota[c] - budget.min_per_class)
        quota[c] -= give
        excess -= give
    short = counts < quota
    if short.any():
        raise CompositionError(
            f"labels requested per class {quota.tolist()} exceed available {counts.tolist()}"
        )
    return quota


def reveal_labels(train: Segments, budget: LabelBudget, seed: int = 0) -> np.ndarray:
    """Indices of training segments whose labels are revealed."""
    quota = label_quotas(train.class_counts(), budget)
    rng = np.random.default_rng([seed, 13])
    picked = [rng.choice(np.flatnonzero(train.labels == c), size=q, replace=False) for c, q in enumerate(quota)]
    return np.sort(np.concatenate(picked))


# ---------------------------------------------------------------- store files

_LE_F32 = np.dtype("<f4")
STORE_MAGIC = "POWERBERT-SEGMENTS"


def write_segment_store(path, segs: Segments, areas: Sequence[int], meta: dict | None = None) -> None:
    n, ws, a = segs.values.shape
    blocks = [segs.values, segs.labels, segs.trace_ids, segs.starts]
    offsets, off = [], 0
    for b in blocks:
        offsets.append(off)
        off += b.size * _LE_F32.itemsize
    header = {
        "ws": ws, "areas": list(areas), "count": n,
        "values_offset": offsets[0], "label_offset": offsets[1],
        "trace_id_offset": offsets[2], "start_offset": offsets[3],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(f"{STORE_MAGIC} {len(blob)}\n".encode())
        fh.write(blob)
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype=_LE_F32).tobytes())


def read_segment_store(path) -> tuple[Segments, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, size = raw[:nl].decode().split()
    if magic != STORE_MAGIC:
        raise ValueError(f"{path}: not a segment store")
    header = json.loads(raw[nl + 1:nl + 1 + int(size)])
    data = np.frombuffer(raw[nl + 1 + int(size):], dtype=_LE_F32)
    n, ws, a = header["count"], header["ws"], len(header["areas"])

    def block(off, count):
        i = off // _LE_F32.itemsize
        return data[i:i + count]

    segs = Segments(
        block(header["values_offset"], n * ws * a).astype(np.float64).reshape(n, ws, a),
        block(header["label_offset"], n).astype(int),
        block(header["trace_id_offset"], n).astype(int),
        block(header["start_offset"], n).astype(int),
    )
    return segs, header
