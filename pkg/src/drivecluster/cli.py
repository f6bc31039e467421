"""Command line entry point: ``drivecluster <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import pipeline as pl
from .baseline import BaselineConfig, BaselineScaleError, run_baseline
from .clustering import kmeans, select_num_clusters, silhouette_score
from .data_model import DataError, parse_dataset
from .evaluation import EvalConfig, evaluate_pipeline
from .frame_codec import FrameCodecConfig, encode_frames, load_frame_model, save_frame_model, train_frame_model
from .render import RasterConfig, SparseFrames, render_sequence
from .sequence_codec import SeqCodecConfig, encode_sequences, load_seq_model, save_seq_model, train_sequence_model
from .synth import ConfigError as SynthConfigError
from .synth import default_templates, generate_dataset, load_templates, read_labels, write_labeled_dataset
from .tensorio import TensorFormatError, read_tensors, write_tensors

log = logging.getLogger("drivecluster")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4


# ---------------------------------------------------------------- helpers


def _parse_value(text: str):
    return yaml.safe_load(text)


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise pl.ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def load_config(path, overrides=None) -> pl.PipelineConfig:
    """Defaults, then the YAML file, then ``overrides`` (dotted keys); later wins."""
    cfg = pl.PipelineConfig()
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise pl.ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise pl.ConfigError(f"{path}: top level must be a mapping")
        flat = {}

        def walk(prefix, node):
            for k, v in node.items():
                key = f"{prefix}{k}"
                if isinstance(v, dict) and k != "rules":
                    walk(key + ".", v)
                else:
                    flat[key] = v
        walk("", raw)
        cfg = cfg.with_overrides(flat)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def read_images(directory) -> tuple[list[str], list[SparseFrames]]:
    d = Path(directory)
    ids = json.loads((d / "ids.json").read_text())
    out = []
    for sid in ids:
        (arr,) = read_tensors(d / f"{sid}.dsc1")
        out.append(SparseFrames.from_dense(arr))
    return ids, out


def read_feature_file(path) -> tuple[list[str], list[np.ndarray]]:
    tensors = read_tensors(path)
    ids_path = Path(str(path) + ".ids.json")
    ids = json.loads(ids_path.read_text()) if ids_path.exists() else [str(i) for i in range(len(tensors))]
    return ids, tensors


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> None:
    templates = load_templates(args.templates) if args.templates else default_templates()
    labeled = generate_dataset(templates, args.count, args.seed)
    write_labeled_dataset(labeled, args.out)
    log.info("wrote %d sequences to %s", len(labeled.dataset.sequences), args.out)


def cmd_render(args) -> None:
    cfg = RasterConfig(pixels=args.pixels, extent=args.extent, v_max=args.vmax)
    ds = parse_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seq in ds.sequences:
        write_tensors(out / f"{seq.id}.dsc1", [np.stack(render_sequence(seq, ds.map_for(seq), cfg))])
    (out / "ids.json").write_text(json.dumps([s.id for s in ds.sequences]))
    (out / "raster.json").write_text(json.dumps(dataclasses.asdict(cfg)))


def cmd_train_frame(args) -> None:
    cfg = args.config.frame
    cfg = dataclasses.replace(cfg, **{k: v for k, v in (("epochs", args.epochs), ("seed", args.seed))
                                     if v is not None})
    _, images = read_images(args.images)
    model = train_frame_model(images, cfg)
    save_frame_model(model, args.out)


def cmd_encode_frames(args) -> None:
    model = load_frame_model(args.model)
    ids, images = read_images(args.images)
    pl.write_frame_features(args.out, ids, [encode_frames(model, f) for f in images])


def cmd_train_seq(args) -> None:
    cfg = args.config.seq
    cfg = dataclasses.replace(cfg, **{k: v for k, v in (("epochs", args.epochs), ("seed", args.seed))
                                     if v is not None})
    _, feats = read_feature_file(args.features)
    from .sequence_codec import build_seq_model
    model = build_seq_model(feats[0].shape[1], cfg)
    train_sequence_model(feats, cfg, model)
    save_seq_model(model, args.out)


def cmd_encode_seqs(args) -> None:
    model = load_seq_model(args.model)
    ids, feats = read_feature_file(args.features)
    write_tensors(args.out, [encode_sequences(model, feats)])
    Path(str(args.out) + ".ids.json").write_text(json.dumps(ids))


def _parse_k(text: str):
    if text.startswith("auto:"):
        lo, hi = text[5:].split("..")
        return None, (int(lo), int(hi))
    return int(text), None


def cmd_cluster(args) -> None:
    ids, tensors = read_feature_file(args.features)
    x = tensors[0] if len(tensors) == 1 and tensors[0].ndim == 2 else np.stack(tensors)
    k, k_range = _parse_k(args.k)
    table = []
    if k is None:
        k, table = select_num_clusters(x, k_range[0], k_range[1], seed=args.seed)
    res = kmeans(x, k, seed=args.seed)
    centroids = Path(str(args.out) + ".centroids.dsc1")
    write_tensors(centroids, [res.centroids.astype(np.float32)])
    sil = silhouette_score(x, res.labels) if len(set(res.labels.tolist())) > 1 else 0.0
    _write_json(args.out, {"k": k, "seed": args.seed, "inertia": res.inertia, "silhouette": sil,
                           "labels": dict(zip(ids, res.labels.tolist())),
                           "centroids": centroids.name, "silhouette_table": table})


def cmd_evaluate(args) -> None:
    if args.run:
        report = pl.evaluate_run(args.run)
    else:
        base = args.config
        ev = dataclasses.replace(base.eval, n_derived=args.n_derived, seed=args.seed)
        if args.k:
            k, k_range = _parse_k(args.k)
            ev = dataclasses.replace(ev, k=k, k_range=k_range or ev.k_range)
        ds = parse_dataset(args.data)
        frame_model = load_frame_model(args.frame_model)
        seq_model = load_seq_model(args.seq_model) if args.seq_model else None
        raster = RasterConfig(pixels=frame_model.pixels, extent=base.raster.extent, v_max=base.raster.v_max)
        report = evaluate_pipeline(ds, frame_model, seq_model, raster, ev, truth=read_labels(args.data),
                                   config_echo={"eval": pl._jsonable(dataclasses.asdict(ev)),
                                                "frame_model": str(args.frame_model),
                                                "seq_model": str(args.seq_model)})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    print(f"tp {report.tp:.4f} fp {report.fp:.4f} k {report.k}")


def cmd_baseline(args) -> None:
    ds = parse_dataset(args.data)
    cfg = BaselineConfig(k=args.k, n_components=args.n_components, n_max=args.n_max, seed=args.seed)
    report = run_baseline(ds, cfg, n_derived=args.n_derived, aug_seed=args.seed, truth=read_labels(args.data))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    if args.plots:
        from .plots import emit_plots
        emit_plots(report, args.plots)
    print(f"tp {report.tp:.4f} fp {report.fp:.4f} k {report.k}")


def cmd_run(args) -> None:
    cfg = args.config
    if args.ablation:
        if args.ablation == "all":
            rows = pl.run_ablations(cfg, args.out or pl.run_root() / f"ablations-{pl.config_hash(cfg.to_dict())}")
            for name, r in rows.items():
                print(f"{name:<20} tp {r['tp']:.4f} fp {r['fp']:.4f}")
            return
        cfg = pl.ablation_config(cfg, args.ablation)
    res = pl.run_pipeline(cfg, args.out)
    print(f"tp {res.report.tp:.4f} fp {res.report.fp:.4f} k {res.report.k} -> {res.run_dir}")


def cmd_plot(args) -> None:
    from .evaluation import EvaluationReport
    from .plots import emit_plots
    run = Path(args.run)
    report_d = json.loads((run / "report.json").read_text())
    (feats,) = read_tensors(run / "seq_features.dsc1")
    labels = np.array(json.loads((run / "cluster_labels.json").read_text()))
    report = EvaluationReport(**{k: report_d.get(k) for k in
                                 ("tp", "fp", "k", "silhouette", "per_cluster", "n_base", "n_derived_total")},
                              features=feats, labels=labels)
    ids, frames = read_feature_file(run / "frame_features.dsc1")
    step = max(1, len(ids) // args.probes)
    probes = dict(list(zip(ids, frames))[::step][:args.probes])
    emit_plots(report, args.out or run / "plots", probes)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drivecluster", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--config", default=None, help="YAML pipeline config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. frame.epochs=5")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate labelled synthetic scenarios")
    s.add_argument("--templates", default=None, help="JSON template file (default: all templates)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", help="rasterise every frame to DSC1 tensors")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pixels", type=int, default=129)
    s.add_argument("--extent", type=float, default=100.0)
    s.add_argument("--vmax", type=float, default=20.0)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train-frame", help="train the frame autoencoder on rendered images")
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train_frame)

    s = sub.add_parser("encode-frames", help="write per-sequence frame features")
    s.add_argument("--model", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode_frames)

    s = sub.add_parser("train-seq", help="train the sequence model on frame features")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train_seq)

    s = sub.add_parser("encode-seqs", help="write one feature row per sequence")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode_seqs)

    s = sub.add_parser("cluster", help="k-means over a feature matrix")
    s.add_argument("--features", required=True)
    s.add_argument("--k", required=True, help="an integer or auto:KMIN..KMAX")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("evaluate", help="augment, encode, cluster and score a dataset")
    s.add_argument("--run", default=None, help="recompute the report of a finished run directory")
    s.add_argument("--data")
    s.add_argument("--frame-model")
    s.add_argument("--seq-model", default=None, help="omit to average frame features")
    s.add_argument("--n-derived", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", default=None, help="an integer or auto:KMIN..KMAX")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("baseline", help="handcrafted features + PCA + DTW + k-medoids")
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--n-components", type=int, default=2)
    s.add_argument("--n-derived", type=int, default=5)
    s.add_argument("--n-max", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--plots", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("run", help="the whole pipeline")
    s.add_argument("--out", default=None, help="run directory (default: $%s/<config hash>)" % pl.RUN_ROOT_ENV)
    s.add_argument("--ablation", default=None, choices=("all",) + pl.ABLATIONS)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("plot", help="redraw the heatmaps of a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--probes", type=int, default=6)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(args.set)
        if args.threads is not None:
            overrides["threads"] = args.threads
        args.config = load_config(args.config, overrides)
        pl.set_threads(args.config.threads)
        if args.command == "evaluate" and not args.run and not (args.data and args.frame_model):
            raise pl.ConfigError("evaluate needs --run, or --data and --frame-model")
        args.func(args)
    except (pl.ConfigError, SynthConfigError, BaselineScaleError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TensorFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except pl.StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as e:  # anything else is a failed stage of the requested command
        log.debug("unhandled", exc_info=True)
        print(f"stage failure: {args.command}: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
