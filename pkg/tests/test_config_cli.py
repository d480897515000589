import csv
import json

import pytest

from powerbert.cli import main
from powerbert.config import ConfigError, RunConfig, dump_config, from_dict, load_config

TINY = """\
seed: 2
seeds: [0]
simulate: {normal: 15, fdia: 15, tda: 15}
dataset: {imbalance: {min_attack_per_class: 5}, label: {min_per_class: 2}}
model: {dim: 8, heads: 2, ff_hidden: 16}
train: {epochs: 1}
forest: {n_estimators: 10}
experiment: {plot: true, embed_count: 9}
"""


def test_defaults_and_round_trip(tmp_path):
    cfg = load_config()
    assert cfg.dataset.w1 == 80 and cfg.forest.n_estimators == 1000 and cfg.eval_seeds == [0, 1, 2]
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path).hash() == cfg.hash()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json").hash() == cfg.hash()


@pytest.mark.parametrize("data, match", [
    ({"bogus": 1}, "unknown key"),
    ({"dataset": {"window": 80}}, "dataset: unknown key"),
    ({"grid": {"areas": [{"inertia": 5, "mass": 1}]}}, r"grid.areas\[0\]"),
    ({"dataset": {"w1": 82}}, "multiple"),
    ({"dataset": {"areas": [1, 6]}}, "subset"),
    ({"loss": {"kind": "huber"}}, "loss"),
    ({"experiment": {"name": "tsne"}}, "unknown"),
    ({"model": {"dim": 30}}, "divisible"),
])
def test_invalid_configs_rejected(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(data)


def test_stage_hashes_ignore_output_location():
    a = RunConfig()
    b = from_dict({"out": "elsewhere", "workers": 3})
    assert a.hash() == b.hash()
    c = from_dict({"forest": {"n_estimators": 10}})
    assert c.stage_hash("model") == a.stage_hash("model") and c.hash() != a.hash()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY)
    return root


def args(root, *extra):
    return [*extra, "--config", str(root / "tiny.yaml"), "--out", str(root / "out")]


def test_cli_workflow(run_dir):
    out = run_dir / "out"
    assert main(args(run_dir, "simulate")) == 0
    assert len(list((out / "traces").glob("trace_*.csv"))) == 45
    index = (out / "traces" / "index.csv").read_text().splitlines()
    assert index[0].startswith("# config_hash,") and len(index) == 47
    snapshot = {p.name: p.read_bytes() for p in (out / "traces").iterdir()}
    assert main(args(run_dir, "simulate")) == 0
    assert snapshot == {p.name: p.read_bytes() for p in (out / "traces").iterdir()}

    assert main(args(run_dir, "pretrain")) == 0
    hist = list(csv.reader(open(out / "history.csv")))
    steps = len(hist) - 2
    assert hist[1] == ["step", "lr", "loss", "small_mean", "large_mean", "large_fraction"]
    assert main(args(run_dir, "pretrain", "--resume")) == 0
    hist = list(csv.reader(open(out / "history.csv")))
    assert int(hist[-1][0]) == 2 * steps

    assert main(args(run_dir, "evaluate", "threshold")) == 0
    assert (out / "reports" / "threshold.csv").exists() and (out / "reports" / "threshold.svg").exists()
    assert main(args(run_dir, "export-embeddings")) == 0
    rows = list(csv.reader(open(out / "embeddings_test.csv")))
    assert rows[0][0] == "# config_hash"
    assert rows[1][:3] == ["segment_id", "label", "f0"] and len(rows[1]) == 2 + 8 and len(rows) == 2 + 9


def test_cli_errors(run_dir, tmp_path, capsys):
    assert main(args(run_dir, "evaluate", "tsne")) == 2
    assert "window" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus: 1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    # a checkpoint from a different model configuration is refused
    assert main(args(run_dir, "export-embeddings", "--loss", "mae")) == 2
    assert "hash" in capsys.readouterr().err
    assert main(["pretrain", "--out", str(tmp_path / "empty")]) == 2
    with pytest.raises(SystemExit):
        main(["simulate", "--areas", "x"])
