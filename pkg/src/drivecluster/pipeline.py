"""End-to-end orchestration: data, three training stages, evaluation, artifacts."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data_model import DataError, Dataset, parse_dataset
from .evaluation import EvalConfig, EvaluationReport, RuleConfig, evaluate_pipeline
from .frame_codec import (FrameCodecConfig, FrameVAE, encode_frames, kl_divergence, load_frame_model,
                          sample_triplets, save_frame_model, train_frame_model,
                          triplet_loss, weighted_reconstruction_loss)
from .render import RasterConfig, SparseFrames, render_sequence_sparse
from .sequence_codec import (SeqCodec, SeqCodecConfig, _unit, batch_loss, build_seq_model, e_step,
                             epoch_views, la_loss_batch, pair_indices, save_seq_model, train_sequence_model)
from .synth import (LabeledDataset, ScenarioTemplate, TEMPLATE_NAMES, generate_dataset, read_labels,
                    write_labeled_dataset)
from .tensorio import write_tensors

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "DRIVECLUSTER_RUN_ROOT"
ABLATIONS = ("no_prediction", "no_reconstruction", "no_triplet", "no_reverse_order", "sequence_average")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class DataConfig:
    path: Optional[str] = None  # dataset directory; synthetic data when unset
    templates: tuple = TEMPLATE_NAMES
    count_per_template: int = 20
    seed: int = 7


@dataclass
class JointConfig:
    epochs: int = 1
    lr_scale: float = 0.1
    batch_sequences: int = 4
    anchors_per_sequence: int = 2


@dataclass
class AblationConfig:
    no_prediction: bool = False
    no_reconstruction: bool = False
    no_triplet: bool = False
    no_reverse_order: bool = False
    sequence_average: bool = False


def _desk_seq() -> SeqCodecConfig:
    # cluster counts and background size scaled to ~120 training sequences; small batches so an
    # epoch is more than one step, and sparse views like the derived siblings seen at evaluation
    return SeqCodecConfig(epochs=180, batch=16, subsample=0.4, k_bg=12, cluster_counts=(6, 12, 18, 24))


def _desk_frame() -> FrameCodecConfig:
    return FrameCodecConfig(epochs=15, anchors_per_sequence=4, foreground_weight=50.0)


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    frame: FrameCodecConfig = field(default_factory=_desk_frame)
    seq: SeqCodecConfig = field(default_factory=_desk_seq)
    joint: JointConfig = field(default_factory=JointConfig)
    eval: EvalConfig = field(default_factory=lambda: EvalConfig(k=None, k_range=(4, 12)))
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    threads: int = 1
    cache_dir: Optional[str] = None

    def __post_init__(self):
        a = self.ablation
        if a.sequence_average and (a.no_prediction or a.no_reconstruction or a.no_reverse_order):
            raise ConfigError("sequence_average trains no sequence model; "
                              "its head/order flags cannot be combined with it")
        if a.no_prediction and a.no_reconstruction and self.seq.la_ratio == 0:
            raise ConfigError("both decoder heads disabled and no local aggregation: nothing to train")

    def effective(self) -> "PipelineConfig":
        """Copy with the ablation flags folded into the stage configs and seeds propagated."""
        a = self.ablation
        frame = dataclasses.replace(self.frame, seed=self.seed,
                                    omega=0.0 if a.no_triplet else self.frame.omega)
        seq = dataclasses.replace(
            self.seq, seed=self.seed,
            use_prediction=self.seq.use_prediction and not a.no_prediction,
            use_reconstruction=self.seq.use_reconstruction and not a.no_reconstruction,
            reverse_recon_order=self.seq.reverse_recon_order and not a.no_reverse_order)
        ev = dataclasses.replace(self.eval, seed=self.seed)
        return dataclasses.replace(self, frame=frame, seq=seq, eval=ev)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            return _build(cls, d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """``overrides`` maps dotted keys (``frame.epochs``) to values."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return PipelineConfig.from_dict(d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(tp, value):
    """Recursively build dataclass ``tp`` from a nested dict, rejecting unknown keys."""
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping for {tp.__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ConfigError(f"unknown {tp.__name__} keys: {sorted(unknown)}")
        return tp(**{k: _build(hints[k], v) for k, v in value.items()})
    origin = typing.get_origin(tp)
    if origin is tuple or tp is tuple:
        return tuple(value)
    return value


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(_jsonable(obj), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- data


def load_data(cfg: DataConfig) -> tuple[Dataset, Optional[dict]]:
    if cfg.path:
        return parse_dataset(cfg.path), read_labels(cfg.path)
    labeled = generate_dataset([ScenarioTemplate(t) for t in cfg.templates],
                               cfg.count_per_template, cfg.seed)
    return labeled.dataset, labeled.labels


def render_dataset(dataset: Dataset, raster: RasterConfig) -> list[SparseFrames]:
    return [render_sequence_sparse(s, dataset.map_for(s), raster) for s in dataset.sequences]


# ---------------------------------------------------------------- stage 3


def train_joint(frame_model: FrameVAE, seq_model: SeqCodec, images: list[SparseFrames],
                frame_cfg: FrameCodecConfig, seq_cfg: SeqCodecConfig, joint: JointConfig) -> None:
    """Fine-tune both models together at a reduced learning rate.

    Frame features enter the sequence loss with gradients, and the frame
    objective is kept on a few anchors per sequence of each batch.
    """
    params = list(frame_model.parameters()) + list(seq_model.parameters())
    opt = torch.optim.Adam(params, lr=seq_cfg.lr * joint.lr_scale, weight_decay=seq_cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seq_cfg.seed, spawn_key=(3,)))
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))

    for epoch in range(joint.epochs):
        views = epoch_views([len(f) for f in images], seq_cfg, rng)
        pairs = [pair_indices(len(v), seq_cfg.pair_mode, seq_cfg.stride, seq_cfg.reverse_recon_order)
                 for v in views]
        lengths = [len(v) for v in views]
        bank = sets = None
        if seq_cfg.la_ratio > 0:
            feats = [encode_frames(frame_model, f.subset(v)) for f, v in zip(images, views)]
            bank, sets = e_step(seq_model, feats, pairs, seq_cfg, seed=int(rng.integers(2**31)))
        frame_model.train()
        seq_model.train()
        sums, nb = {"rp": 0.0, "la": 0.0, "frame": 0.0}, 0
        order = rng.permutation(len(images))
        for s in range(0, len(order), joint.batch_sequences):
            rows = order[s:s + joint.batch_sequences]
            x_list = [torch.from_numpy(images[i].dense(views[i])) for i in rows]
            mu_all, _ = frame_model.encode(torch.cat(x_list))
            z_list = list(mu_all.split([len(x) for x in x_list]))
            rp, y = batch_loss(seq_model, z_list, [pairs[i] for i in rows])
            total = rp
            la = torch.zeros(())
            if sets is not None:
                la = la_loss_batch(_unit(y), bank, rows.tolist(), sets, seq_cfg.tau)
                total = total + seq_cfg.la_ratio * la

            frame_term = torch.zeros(())
            if len(rows) >= 2:
                idx = sample_triplets([lengths[i] for i in rows], joint.anchors_per_sequence, rng,
                                      frame_cfg.positive_offset, frame_cfg.negative_offset)
                za = torch.stack([z_list[a][k] for a, k in zip(idx.seq, idx.anchor)])
                zp = torch.stack([z_list[a][k] for a, k in zip(idx.seq, idx.positive)])
                zn = torch.stack([z_list[a][k] for a, k in zip(idx.seq, idx.negative)])
                zo = torch.stack([z_list[a][k] for a, k in zip(idx.other_seq, idx.other_frame)])
                xa = torch.stack([x_list[a][k] for a, k in zip(idx.seq, idx.anchor)])
                x_bar, mu_a, logvar_a = frame_model(xa, generator=gen)
                frame_term = (weighted_reconstruction_loss(xa, x_bar, frame_cfg.foreground_weight)
                              + frame_cfg.kl_weight * kl_divergence(mu_a, logvar_a))
                if frame_cfg.omega != 0:
                    frame_term = frame_term + frame_cfg.omega * triplet_loss(za, zp, zn, zo, frame_cfg.alpha)
                total = total + frame_term

            opt.zero_grad()
            total.backward()
            opt.step()
            sums["rp"] += rp.item()
            sums["la"] += la.item()
            sums["frame"] += frame_term.item()
            nb += 1
        row = {k: v / max(nb, 1) for k, v in sums.items()}
        row.update(epoch=seq_model.epoch + 1, stage=3)
        seq_model.epoch += 1
        seq_model.history.append(row)
        log.info("joint epoch %d rp %.5f la %.4f frame %.4f", epoch + 1, row["rp"], row["la"], row["frame"])
    frame_model.eval()
    seq_model.eval()


# ---------------------------------------------------------------- run


@dataclass
class RunResult:
    report: EvaluationReport
    run_dir: Path
    timings: dict


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def write_frame_features(path, ids, feats) -> None:
    write_tensors(path, [np.asarray(f, dtype=np.float32) for f in feats])
    Path(str(path) + ".ids.json").write_text(json.dumps(list(ids)))


def _stage(name, timings):
    class _Ctx:
        def __enter__(self):
            log.info("stage %s", name)
            self.t = time.perf_counter()

        def __exit__(self, et, ev, tb):
            timings[name] = round(time.perf_counter() - self.t, 3)
            if ev is not None and not isinstance(ev, (StageError, ConfigError, DataError)):
                raise StageError(name, ev) from ev
            return False
    return _Ctx()


def _frame_stage(cfg: PipelineConfig, images, out: Path) -> FrameVAE:
    cache = None
    if cfg.cache_dir:
        key = config_hash({"data": asdict(cfg.data), "raster": asdict(cfg.raster), "frame": asdict(cfg.frame)})
        cache = Path(cfg.cache_dir) / f"frame-{key}.ckpt"
        if cache.exists():
            log.info("reusing stage-1 model %s", cache)
            model = load_frame_model(cache)
            save_frame_model(model, out)
            return model
    model = train_frame_model(images, cfg.frame)
    save_frame_model(model, out)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_frame_model(model, cache)
    return model


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, n))
    try:
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass


def run_pipeline(cfg: PipelineConfig, run_dir=None, emit=True) -> RunResult:
    """Run every stage and write artifacts under ``run_dir`` (default: run root / config hash)."""
    set_threads(cfg.threads)
    eff = cfg.effective()
    run_dir = Path(run_dir) if run_dir is not None else run_root() / config_hash(cfg.to_dict())
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    timings: dict = {}

    with _stage("data", timings):
        dataset, truth = load_data(eff.data)
        if not dataset.sequences:
            raise DataError("dataset has no sequences")
        if not eff.data.path:
            write_labeled_dataset(LabeledDataset(dataset, truth), run_dir / "data")
    with _stage("render", timings):
        images = render_dataset(dataset, eff.raster)
    with _stage("train-frame", timings):
        frame_model = _frame_stage(eff, images, run_dir / "frame_model.ckpt")
    with _stage("encode-frames", timings):
        feats = [encode_frames(frame_model, f) for f in images]
        write_frame_features(run_dir / "frame_features.dsc1", [s.id for s in dataset.sequences], feats)

    seq_model = None
    if not eff.ablation.sequence_average:
        with _stage("train-seq", timings):
            seq_model = build_seq_model(eff.frame.d_f, eff.seq)
            train_sequence_model(feats, eff.seq, seq_model)
            save_seq_model(seq_model, run_dir / "seq_model_stage2.ckpt")
        if eff.joint.epochs > 0:
            with _stage("train-joint", timings):
                train_joint(frame_model, seq_model, images, eff.frame, eff.seq, eff.joint)
                save_frame_model(frame_model, run_dir / "frame_model.ckpt")
                save_seq_model(seq_model, run_dir / "seq_model.ckpt")
        else:
            save_seq_model(seq_model, run_dir / "seq_model.ckpt")

    with _stage("evaluate", timings):
        report = evaluate_pipeline(dataset, frame_model, seq_model, eff.raster, eff.eval,
                                   truth=truth, images=images, config_echo=cfg.to_dict())
        write_tensors(run_dir / "seq_features.dsc1", [report.features])
        (run_dir / "seq_features.dsc1.ids.json").write_text(json.dumps(report.derived_ids))
        (run_dir / "cluster_labels.json").write_text(json.dumps(report.labels.tolist()))
        (run_dir / "report.json").write_text(report.to_json())
    if emit:
        with _stage("plot", timings):
            from .plots import emit_plots
            probes = {s.id: encode_frames(frame_model, img)
                      for s, img in list(zip(dataset.sequences, images))[:: max(1, len(images) // 6)][:6]}
            emit_plots(report, run_dir / "plots", probes)
    (run_dir / "timings.json").write_text(json.dumps(timings, indent=1))
    log.info("run finished: tp %.4f fp %.4f k %d in %s", report.tp, report.fp, report.k, run_dir)
    return RunResult(report, run_dir, timings)


def load_run_config(run_dir) -> PipelineConfig:
    return PipelineConfig.from_dict(json.loads((Path(run_dir) / "config.json").read_text()))


def evaluate_run(run_dir) -> EvaluationReport:
    """Recompute the report of a finished run from its persisted data and checkpoints."""
    from .sequence_codec import load_seq_model

    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    eff = cfg.effective()
    data_dir = eff.data.path or run_dir / "data"
    dataset, truth = parse_dataset(data_dir), read_labels(data_dir)
    frame_model = load_frame_model(run_dir / "frame_model.ckpt")
    seq_path = run_dir / "seq_model.ckpt"
    seq_model = load_seq_model(seq_path) if seq_path.exists() else None
    return evaluate_pipeline(dataset, frame_model, seq_model, eff.raster, eff.eval,
                             truth=truth, config_echo=cfg.to_dict())


def ablation_config(base: PipelineConfig, name: str) -> PipelineConfig:
    if name == "full":
        return base
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}")
    return dataclasses.replace(base, ablation=AblationConfig(**{name: True}))


def run_ablations(base: PipelineConfig, out_dir, names=("full",) + ABLATIONS) -> dict:
    """Run the full method and each ablation; writes ablations.json and a text table."""
    out_dir = Path(out_dir)
    rows = {}
    for name in names:
        res = run_pipeline(ablation_config(base, name), out_dir / name, emit=False)
        rows[name] = {"tp": res.report.tp, "fp": res.report.fp, "k": res.report.k,
                      "purity": res.report.purity, "seconds": sum(res.timings.values())}
    (out_dir / "ablations.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    lines = [f"{'setting':<20}{'TP':>8}{'FP':>8}{'k':>4}"]
    lines += [f"{n:<20}{r['tp']:>8.4f}{r['fp']:>8.4f}{r['k']:>4}" for n, r in rows.items()]
    (out_dir / "ablations.txt").write_text("\n".join(lines) + "\n")
    return rows
