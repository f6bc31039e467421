import json

import numpy as np
import pytest
import yaml

from drivecluster import cli
from drivecluster import pipeline as pl
from drivecluster.tensorio import read_tensors

TINY = [
    "data.count_per_template=2", "data.seed=3", "raster.pixels=33",
    "frame.epochs=1", "frame.d_f=8", "frame.channels=[4,8]",
    "seq.epochs=2", "seq.k_bg=3", "seq.cluster_counts=[2,3]", "seq.batch=8",
    "seq.d_s=8", "seq.hidden=8", "seq.layers=1", "eval.k_range=[2,4]",
]


def run_cli(*argv, sets=TINY):
    args = []
    for s in sets:
        args += ["--set", s]
    return cli.main(args + list(argv))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    assert run_cli("run", "--out", str(out)) == 0
    return out


def test_defaults_and_overrides():
    cfg = pl.PipelineConfig()
    assert cfg.data.count_per_template == 20 and cfg.data.seed == 7
    over = cfg.with_overrides({"frame.epochs": 2, "eval.k_range": [3, 5]})
    assert over.frame.epochs == 2 and over.eval.k_range == (3, 5)
    with pytest.raises(pl.ConfigError):
        cfg.with_overrides({"frame.nope": 1})
    with pytest.raises(pl.ConfigError):
        cfg.with_overrides({"nosection.x": 1})


def test_config_round_trip_and_hash():
    cfg = pl.PipelineConfig().with_overrides({"seq.epochs": 3})
    back = pl.PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert pl.config_hash(back.to_dict()) == pl.config_hash(cfg.to_dict())
    assert pl.config_hash(pl.PipelineConfig().to_dict()) != pl.config_hash(cfg.to_dict())


def test_effective_folds_ablations():
    cfg = pl.ablation_config(pl.PipelineConfig(seed=5), "no_triplet").effective()
    assert cfg.frame.omega == 0.0 and cfg.frame.seed == 5 and cfg.seq.seed == 5
    cfg = pl.ablation_config(pl.PipelineConfig(), "no_reverse_order").effective()
    assert cfg.seq.reverse_recon_order is False
    with pytest.raises(pl.ConfigError):
        pl.ablation_config(pl.PipelineConfig(), "bogus")


def test_inconsistent_ablation_rejected():
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig(ablation=pl.AblationConfig(sequence_average=True, no_prediction=True))


def test_yaml_then_set(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"frame": {"epochs": 4}, "seq": {"epochs": 9}}))
    cfg = cli.load_config(path, {"seq.epochs": 11})
    assert cfg.frame.epochs == 4 and cfg.seq.epochs == 11


def test_exit_codes(tmp_path):
    assert cli.main(["--set", "frame.bogus=1", "synth", "--count", "1", "--out", str(tmp_path / "a")]) == 2
    assert cli.main(["--set", "novalue", "synth", "--count", "1", "--out", str(tmp_path / "a")]) == 2
    assert cli.main(["evaluate", "--out", str(tmp_path / "r.json")]) == 2
    assert cli.main(["render", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "img")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("[]")
    assert cli.main(["synth", "--templates", str(bad), "--count", "1", "--out", str(tmp_path / "b")]) == 2


def test_baseline_scale_exit_code(tmp_path):
    data = tmp_path / "d"
    assert cli.main(["synth", "--count", "2", "--seed", "1", "--out", str(data)]) == 0
    assert cli.main(["baseline", "--data", str(data), "--k", "3", "--n-max", "10",
                     "--out", str(tmp_path / "b.json")]) == 2
    assert cli.main(["baseline", "--data", str(data), "--k", "3", "--out", str(tmp_path / "b.json")]) == 0
    rep = json.loads((tmp_path / "b.json").read_text())
    assert {"tp", "fp", "k", "per_cluster"} <= set(rep)


def test_stage_failure_exit_code(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise RuntimeError("boom")
    monkeypatch.setattr(pl, "train_frame_model", broken)
    assert run_cli("run", "--out", str(tmp_path / "r")) == 4


def test_run_artifacts(tiny_run):
    for name in ("config.json", "report.json", "frame_model.ckpt", "seq_model.ckpt", "seq_model_stage2.ckpt",
                 "frame_features.dsc1", "seq_features.dsc1", "cluster_labels.json", "timings.json",
                 "plots/sequence_distances.png", "plots/sequence_distances.dsc1"):
        assert (tiny_run / name).exists(), name
    rep = json.loads((tiny_run / "report.json").read_text())
    assert rep["n_derived_total"] == 12 * 5
    feats = read_tensors(tiny_run / "frame_features.dsc1")
    ids = json.loads((tiny_run / "frame_features.dsc1.ids.json").read_text())
    assert len(feats) == len(ids) == 12 and feats[0].shape[1] == 8
    mat, lab = read_tensors(tiny_run / "plots/sequence_distances.dsc1")
    assert mat.shape == (60, 60) and np.allclose(mat, mat.T) and np.all(np.diff(lab) >= 0)


def test_evaluate_run_reproduces_report(tiny_run, tmp_path):
    out = tmp_path / "again.json"
    assert cli.main(["evaluate", "--run", str(tiny_run), "--out", str(out)]) == 0
    assert out.read_text() == (tiny_run / "report.json").read_text()


def test_plot_command(tiny_run, tmp_path):
    assert cli.main(["plot", "--run", str(tiny_run), "--out", str(tmp_path / "p"), "--probes", "2"]) == 0
    assert (tmp_path / "p" / "sequence_distances.png").exists()
    assert (tmp_path / "p" / "frame_distances_01.dsc1").exists()


def test_stepwise_commands(tmp_path):
    data, img = tmp_path / "data", tmp_path / "img"
    assert cli.main(["synth", "--count", "2", "--seed", "4", "--out", str(data)]) == 0
    assert cli.main(["render", "--data", str(data), "--out", str(img), "--pixels", "33"]) == 0
    assert run_cli("train-frame", "--images", str(img), "--out", str(tmp_path / "f.ckpt")) == 0
    assert cli.main(["encode-frames", "--model", str(tmp_path / "f.ckpt"), "--images", str(img),
                     "--out", str(tmp_path / "z.dsc1")]) == 0
    assert run_cli("train-seq", "--features", str(tmp_path / "z.dsc1"), "--out", str(tmp_path / "s.ckpt")) == 0
    assert cli.main(["encode-seqs", "--model", str(tmp_path / "s.ckpt"), "--features", str(tmp_path / "z.dsc1"),
                     "--out", str(tmp_path / "y.dsc1")]) == 0
    assert cli.main(["cluster", "--features", str(tmp_path / "y.dsc1"), "--k", "auto:2..4",
                     "--out", str(tmp_path / "c.json")]) == 0
    clus = json.loads((tmp_path / "c.json").read_text())
    assert 2 <= clus["k"] <= 4 and len(clus["labels"]) == 12
    assert run_cli("evaluate", "--data", str(data), "--frame-model", str(tmp_path / "f.ckpt"),
                   "--seq-model", str(tmp_path / "s.ckpt"), "--k", "3", "--out", str(tmp_path / "e.json")) == 0
    assert json.loads((tmp_path / "e.json").read_text())["k"] == 3


def test_run_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(pl.RUN_ROOT_ENV, str(tmp_path))
    assert pl.run_root() == tmp_path
