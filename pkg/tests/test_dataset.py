import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powerbert.dataset import (
    FDIA, NORMAL, TDA, CompositionError, ImbalanceSpec, LabelBudget, Segments, attack_quota, build_splits,
    extract_segments, fit_scaler, label_quotas, read_segment_store, reveal_labels, segment_count, split_traces,
    transform, write_segment_store,
)
from powerbert.grid import Trace, simulate_corpus


def make_trace(ace, kind="none", active=None):
    ace = np.asarray(ace, dtype=float)
    if ace.ndim == 1:
        ace = np.tile(ace[:, None], (1, 5))
    z = np.zeros_like(ace)
    return Trace(z, z, ace, kind, active)


def test_scaler_examples():
    t = make_trace([2.0, 4.0, 6.0])
    sc = fit_scaler([t])
    assert np.all(sc.x_min == 2.0) and np.all(sc.x_max == 6.0)
    assert transform(sc, make_trace([4.0, 2.0, 6.0, 8.0]))[:, 0].tolist() == [0.5, 0.0, 1.0, 1.5]


def test_constant_channel_maps_to_zero():
    sc = fit_scaler([make_trace([3.0, 3.0, 3.0])])
    assert sc.degenerate.all()
    assert np.all(transform(sc, make_trace([3.0, 7.0])) == 0.0)


def test_scaler_of_two_traces_equals_concatenation():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 30, 5))
    two = fit_scaler([make_trace(a), make_trace(b)])
    one = fit_scaler([make_trace(np.concatenate([a, b]))])
    assert np.array_equal(two.x_min, one.x_min) and np.array_equal(two.x_max, one.x_max)
    with pytest.raises(ValueError):
        fit_scaler([])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_transform_of_fitted_data_in_unit_box(seed):
    rng = np.random.default_rng(seed)
    traces = [make_trace(rng.normal(size=(20, 5)) * rng.uniform(0.01, 100)) for _ in range(3)]
    sc = fit_scaler(traces)
    for t in traces:
        x = transform(sc, t)
        assert x.min() >= 0.0 and x.max() <= 1.0


def test_segment_count_and_layout():
    t = make_trace(np.arange(100.0))
    segs = extract_segments(t, w1=80, stride=5)
    assert len(segs) == 17 == segment_count(100, 20, 5)
    assert segs.values.shape == (17, 20, 5)
    assert segs.values[3, 0, 0] == 15.0 and segs.starts[3] == 15
    sub = extract_segments(t, w1=80, stride=5, areas=(2, 4))
    assert sub.values.shape == (17, 20, 2)
    with pytest.raises(ValueError):
        extract_segments(t, w1=82)


def test_labels_follow_attack_overlap():
    active = np.zeros(100, dtype=bool)
    active[40] = True
    segs = extract_segments(make_trace(np.zeros(100), "tda", active), w1=80, stride=5)
    starts = segs.starts
    expect = np.where((starts <= 40) & (40 < starts + 20), TDA, NORMAL)
    assert np.array_equal(segs.labels, expect)
    assert segs.labels[0] == NORMAL and TDA in segs.labels


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_enlarging_window_never_clears_attack_label(seed):
    rng = np.random.default_rng(seed)
    active = np.zeros(120, dtype=bool)
    s = int(rng.integers(0, 110))
    active[s:s + int(rng.integers(1, 10))] = True
    t = make_trace(np.zeros(120), "fdia", active)
    small = extract_segments(t, 40, 1)
    large = extract_segments(t, 80, 1)
    # the larger window starting at the same offset contains the smaller one
    n = len(large)
    assert np.all(large.labels[small.labels[:n] == FDIA] == FDIA)


def test_trace_split_partition_and_fractions():
    traces = [make_trace(np.zeros(5), kind) for kind in ["none", "fdia", "tda"] * 333 + ["none"]]
    parts = split_traces(traces, seed=4)
    assert [len(parts[k]) for k in ("train", "validation", "test")] == [430, 70, 500]
    everything = sorted(parts["train"] + parts["validation"] + parts["test"])
    assert everything == list(range(1000))
    assert parts == split_traces(traces, seed=4)
    assert parts != split_traces(traces, seed=5)


def test_attack_quota_respects_fraction():
    spec = ImbalanceSpec(attack_fraction=0.0001, min_attack_per_class=0)
    n_normal = 1_000_000
    q = attack_quota(n_normal, spec)
    assert abs(q / (n_normal + 2 * q) - 0.0001) <= 1.0 / (n_normal + 2 * q)
    assert attack_quota(100, ImbalanceSpec()) == 10


def test_build_splits_composition():
    traces = simulate_corpus(None, {"none": 15, "fdia": 15, "tda": 15}, seed=0)
    split = build_splits(traces, w1=80, imbalance=ImbalanceSpec(min_attack_per_class=3), seed=1)
    tr = split.train.class_counts()
    assert tr[TDA] == tr[FDIA] == 3
    te = split.test.class_counts()
    assert te[0] == te[1] == te[2] > 0
    again = build_splits(traces, w1=80, imbalance=ImbalanceSpec(min_attack_per_class=3), seed=1)
    assert np.array_equal(split.train.values, again.train.values)
    train_ids = {traces[i].meta["seed"] for i in split.trace_split["train"]}
    test_ids = {traces[i].meta["seed"] for i in split.trace_split["test"]}
    assert not train_ids & test_ids
    with pytest.raises(CompositionError, match="need 500"):
        build_splits(traces, imbalance=ImbalanceSpec(min_attack_per_class=500))


def test_label_quota_arithmetic():
    q = label_quotas([999_800, 100, 100], LabelBudget(rate=0.0002, min_per_class=1))
    assert q.sum() == 200 and q.min() >= 1
    q = label_quotas([1000, 10, 10], LabelBudget(rate=0.00002, min_per_class=5))
    assert q.tolist() == [5, 5, 5]
    with pytest.raises(CompositionError):
        label_quotas([2, 2, 2], LabelBudget(min_per_class=5))


def test_reveal_labels_deterministic_and_stratified():
    labels = np.repeat([0, 1, 2], [500, 20, 20])
    segs = Segments(np.zeros((540, 2, 1)), labels, np.zeros(540, int), np.arange(540))
    idx = reveal_labels(segs, LabelBudget(rate=0.05, min_per_class=3), seed=2)
    assert np.array_equal(idx, reveal_labels(segs, LabelBudget(rate=0.05, min_per_class=3), seed=2))
    counts = np.bincount(labels[idx], minlength=3)
    assert counts.sum() == 27 and counts.min() >= 3


def test_segment_store_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    segs = Segments(rng.random((7, 20, 3)), rng.integers(0, 3, 7), np.arange(7), np.arange(7) * 5)
    write_segment_store(tmp_path / "s.seg", segs, (1, 3, 5), {"config_hash": "abc"})
    back, header = read_segment_store(tmp_path / "s.seg")
    assert np.allclose(back.values, segs.values, rtol=1e-7, atol=0)
    assert np.array_equal(back.labels, segs.labels) and np.array_equal(back.starts, segs.starts)
    assert header["areas"] == [1, 3, 5] and header["ws"] == 20 and header["meta"]["config_hash"] == "abc"
    raw = (tmp_path / "s.seg").read_bytes()
    body = raw[raw.index(b"\n") + 1 + int(raw[:raw.index(b"\n")].split()[1]):]
    assert np.frombuffer(body[:4], "<f4")[0] == np.float32(segs.values[0, 0, 0])
    (tmp_path / "bad.seg").write_bytes(b"NOPE 2\n{}")
    with pytest.raises(ValueError):
        read_segment_store(tmp_path / "bad.seg")
