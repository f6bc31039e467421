"""Distance-matrix heatmaps, each written as PNG next to its raw DSC1 tensor."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .tensorio import write_tensors  # noqa: E402


def distance_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = (x ** 2).sum(1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


def cluster_sorted(features, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(distance matrix, sorted labels, permutation) with rows grouped by cluster."""
    labels = np.asarray(labels)
    order = np.argsort(labels, kind="stable")
    return distance_matrix(np.asarray(features)[order]), labels[order], order


def _heatmap(mat: np.ndarray, path: Path, title: str, bar: Optional[np.ndarray] = None) -> None:
    fig = plt.figure(figsize=(5.5, 5))
    if bar is not None:
        ax_bar = fig.add_axes([0.08, 0.1, 0.03, 0.8])
        ax_bar.imshow(bar[:, None], aspect="auto", cmap="tab20", interpolation="nearest")
        ax_bar.set_axis_off()
        ax = fig.add_axes([0.13, 0.1, 0.68, 0.8])
    else:
        ax = fig.add_axes([0.1, 0.1, 0.71, 0.8])
    im = ax.imshow(mat, cmap="viridis", interpolation="nearest")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, cax=fig.add_axes([0.84, 0.1, 0.03, 0.8]))
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_plots(report, out_dir, probe_frames: Optional[Mapping[str, np.ndarray]] = None) -> list[Path]:
    """Cluster-sorted sequence distances plus per-probe frame distances."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    have_matrix = report.distances is not None or report.features is not None
    if have_matrix and report.labels is not None and len(report.labels):
        if report.distances is not None:
            order = np.argsort(report.labels, kind="stable")
            mat = np.asarray(report.distances, dtype=np.float64)[np.ix_(order, order)]
            lab = np.asarray(report.labels)[order]
        else:
            mat, lab, _ = cluster_sorted(report.features, report.labels)
        write_tensors(out / "sequence_distances.dsc1", [mat.astype(np.float32), lab.astype(np.float32)])
        _heatmap(mat, out / "sequence_distances.png", f"sequence feature distances, k={report.k}", lab)
        written += [out / "sequence_distances.dsc1", out / "sequence_distances.png"]
    for i, (sid, z) in enumerate(sorted((probe_frames or {}).items())):
        mat = distance_matrix(z)
        stem = f"frame_distances_{i:02d}"
        write_tensors(out / f"{stem}.dsc1", [mat.astype(np.float32)])
        _heatmap(mat, out / f"{stem}.png", f"frame feature distances: {sid}")
        written += [out / f"{stem}.dsc1", out / f"{stem}.png"]
    return written
