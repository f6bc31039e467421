"""Convolutional VAE for rendered frames, trained with reconstruction and a
temporal contrast triplet loss."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .render import N_LAYERS, SparseFrames
from .tensorio import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)


class TripletIndexError(ValueError):
    pass


@dataclass
class FrameCodecConfig:
    d_f: int = 64
    omega: float = 1.0
    alpha: float = 1.0
    batch: int = 32
    lr: float = 1e-3
    epochs: int = 20
    seed: int = 0
    kl_weight: float = 1e-4
    # extra weight on non-zero ego/agent pixels (layers 0-2); 0 gives plain MSE
    foreground_weight: float = 0.0
    anchors_per_sequence: int = 4
    positive_offset: int = 1
    negative_offset: int = 5
    channels: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if not 0 < self.positive_offset < self.negative_offset:
            raise ValueError("need 0 < positive_offset < negative_offset")


def _conv_sizes(pixels: int, n: int) -> list[int]:
    sizes = [pixels]
    for _ in range(n):
        sizes.append((sizes[-1] - 1) // 2 + 1)
    return sizes


class FrameVAE(nn.Module):
    """Stride-2 conv encoder with mean/log-variance heads and a mirrored decoder."""

    def __init__(self, pixels: int, d_f: int = 64, channels=(16, 32, 64, 128)):
        super().__init__()
        self.pixels, self.d_f, self.channels = pixels, d_f, tuple(channels)
        sizes = _conv_sizes(pixels, len(channels))
        self.bottleneck = sizes[-1]
        enc, c_in = [], N_LAYERS
        for c in channels:
            enc += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c
        self.encoder = nn.Sequential(*enc, nn.Flatten())
        flat = channels[-1] * self.bottleneck ** 2
        self.mu_head = nn.Linear(flat, d_f)
        self.logvar_head = nn.Linear(flat, d_f)
        self.decoder_in = nn.Linear(d_f, flat)
        dec = []
        outs = list(reversed(channels[:-1])) + [N_LAYERS]
        c_in = channels[-1]
        for i, c in enumerate(outs):
            # output_padding restores even sizes that the stride-2 conv halved
            target, src = sizes[-2 - i], sizes[-1 - i]
            dec.append(nn.ConvTranspose2d(c_in, c, 3, stride=2, padding=1,
                                          output_padding=target - (2 * src - 1)))
            if i < len(outs) - 1:
                dec.append(nn.LeakyReLU(0.2))
            c_in = c
        self.decoder = nn.Sequential(*dec)
        self.config: Optional[FrameCodecConfig] = None
        self.history: list[dict] = []
        self.epoch = 0

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.decoder_in(z).view(-1, self.channels[-1], self.bottleneck, self.bottleneck)
        return self.decoder(h)

    def forward(self, x, generator=None):
        mu, logvar = self.encode(x)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mu, logvar


def build_model(pixels: int, cfg: FrameCodecConfig) -> FrameVAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = FrameVAE(pixels, cfg.d_f, cfg.channels)
    model.config = cfg
    return model


def _check_images(model: FrameVAE, x: torch.Tensor) -> torch.Tensor:
    shape = (N_LAYERS, model.pixels, model.pixels)
    if tuple(x.shape[-3:]) != shape:
        raise ValueError(f"image shape {tuple(x.shape)} does not match model input {shape}")
    return x


def encode_frame(model: FrameVAE, img, mode: str = "deterministic",
                 generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Feature vector of one (4, P, P) image: the mean head, or a reparameterised sample."""
    x = _check_images(model, torch.as_tensor(np.asarray(img, dtype=np.float32)))
    if x.dim() != 3:
        raise ValueError("encode_frame expects a single (4, P, P) image")
    with torch.no_grad():
        mu, logvar = model.encode(x[None])
        if mode == "deterministic":
            z = mu
        elif mode == "sampled":
            z = mu + torch.exp(0.5 * logvar) * torch.randn(mu.shape, generator=generator)
        else:
            raise ValueError(f"unknown encode mode {mode!r}")
    return z[0].numpy()


def encode_frames(model: FrameVAE, frames, batch: int = 256) -> np.ndarray:
    """Deterministic features for a SparseFrames or an (N, 4, P, P) array."""
    n = len(frames)
    out = np.zeros((n, model.d_f), dtype=np.float32)
    model.eval()
    with torch.no_grad():
        for s in range(0, n, batch):
            idx = range(s, min(n, s + batch))
            x = frames.dense(idx) if isinstance(frames, SparseFrames) else np.asarray(frames[s:s + batch])
            mu, _ = model.encode(_check_images(model, torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))))
            out[s:s + len(idx)] = mu.numpy()
    return out


def decode_frame(model: FrameVAE, z) -> np.ndarray:
    z = torch.as_tensor(np.asarray(z, dtype=np.float32))
    if z.shape != (model.d_f,):
        raise ValueError(f"feature has shape {tuple(z.shape)}, model expects ({model.d_f},)")
    with torch.no_grad():
        return model.decode(z[None])[0].numpy()


def reconstruction_loss(x: torch.Tensor, x_bar: torch.Tensor) -> torch.Tensor:
    if x.shape != x_bar.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_bar.shape)}")
    return ((x - x_bar) ** 2).mean()


def weighted_reconstruction_loss(x: torch.Tensor, x_bar: torch.Tensor,
                                 foreground_weight: float) -> torch.Tensor:
    """Squared error averaged with weight 1 + foreground_weight on the non-zero
    pixels of the ego and agent layers, so that small vehicle footprints are
    not drowned out by lane boundaries."""
    if foreground_weight == 0:
        return reconstruction_loss(x, x_bar)
    if x.shape != x_bar.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_bar.shape)}")
    w = torch.ones_like(x)
    w[:, :3] += foreground_weight * (x[:, :3] != 0).to(x.dtype)
    return (w * (x - x_bar) ** 2).sum() / w.sum()


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return (-0.5 * (1 + logvar - mu ** 2 - logvar.exp()).sum(dim=1)).mean()


@dataclass
class TripletIndex:
    """Per anchor: sequence i, frames k (anchor), m (positive), n (temporal
    negative), and the cross-sequence negative (j, m_j)."""
    seq: np.ndarray
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    other_seq: np.ndarray
    other_frame: np.ndarray

    def __len__(self):
        return len(self.seq)

    def validate(self) -> None:
        near = np.abs(self.anchor - self.positive)
        far = np.abs(self.anchor - self.negative)
        if np.any(near >= far):
            raise TripletIndexError("need |t_k - t_m| < |t_k - t_n| for every anchor")
        if np.any(self.seq == self.other_seq):
            raise TripletIndexError("cross-sequence negative must come from another sequence")


def triplet_loss(anchor, positive, negative, other, alpha: float = 1.0,
                 index: Optional[TripletIndex] = None) -> torch.Tensor:
    """Mean over anchors of the temporal hinge plus the cross-sequence hinge,
    both on squared Euclidean distances."""
    if index is not None:
        index.validate()
    d_pos = ((anchor - positive) ** 2).sum(dim=-1)
    d_neg = ((anchor - negative) ** 2).sum(dim=-1)
    d_other = ((anchor - other) ** 2).sum(dim=-1)
    hinge = torch.clamp(d_pos - d_neg + alpha, min=0) + torch.clamp(d_pos - d_other + alpha, min=0)
    return hinge.mean()


def sample_triplets(lengths: Sequence[int], per_sequence: int, rng: np.random.Generator,
                    pos_offset: int = 1, neg_offset: int = 5) -> TripletIndex:
    """Anchors with m = k +/- pos_offset and n = k +/- neg_offset on the same side."""
    n_seq = len(lengths)
    if n_seq < 2:
        raise TripletIndexError("triplet negatives unavailable: need at least 2 sequences")
    rows = []
    for i, m_i in enumerate(lengths):
        if m_i <= pos_offset:
            continue
        for _ in range(per_sequence):
            k = int(rng.integers(m_i))
            sides = [s for s in (1, -1) if 0 <= k + s * pos_offset < m_i]
            side = sides[int(rng.integers(len(sides)))]
            m = k + side * pos_offset
            n = int(np.clip(k + side * neg_offset, 0, m_i - 1))
            if abs(n - k) <= abs(m - k):
                # clamped too far: take the far side instead when it exists
                n = k - side * neg_offset
                if not 0 <= n < m_i:
                    continue
            j = int(rng.integers(n_seq - 1))
            j += j >= i
            rows.append((i, k, m, n, j, min(m, lengths[j] - 1)))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 6)
    return TripletIndex(*arr.T)


def train_frame_model(images: Sequence[SparseFrames], cfg: FrameCodecConfig,
                      model: Optional[FrameVAE] = None) -> FrameVAE:
    """Fit the frame VAE on rendered sequences; returns the model with ``history``.

    The loss is reconstruction MSE + omega * triplet + kl_weight * KL. The
    triplet term is always logged, but with ``omega == 0`` it is left out of
    the optimised objective.
    """
    if len(images) < 2:
        raise TripletIndexError("triplet negatives unavailable: need at least 2 sequences")
    pixels = images[0].shape[-1]
    if model is None:
        model = build_model(pixels, cfg)
    model.config = cfg
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    lengths = [len(f) for f in images]

    for epoch in range(cfg.epochs):
        model.train()
        idx = sample_triplets(lengths, cfg.anchors_per_sequence, rng,
                              cfg.positive_offset, cfg.negative_offset)
        order = rng.permutation(len(idx))
        sums = {"recon": 0.0, "triplet": 0.0, "kl": 0.0, "total": 0.0}
        n_batches = 0
        for s in range(0, len(order), cfg.batch):
            b = order[s:s + cfg.batch]
            picks = ([(idx.seq[q], idx.anchor[q]) for q in b]
                     + [(idx.seq[q], idx.positive[q]) for q in b]
                     + [(idx.seq[q], idx.negative[q]) for q in b]
                     + [(idx.other_seq[q], idx.other_frame[q]) for q in b])
            x = torch.from_numpy(np.concatenate([images[i].dense([k]) for i, k in picks]))
            x_bar, mu, logvar = model(x, generator=gen)
            recon = weighted_reconstruction_loss(x, x_bar, cfg.foreground_weight)
            kl = kl_divergence(mu, logvar)
            za, zp, zn, zo = mu.split(len(b))
            trip = triplet_loss(za, zp, zn, zo, cfg.alpha)
            total = recon + cfg.kl_weight * kl
            if cfg.omega != 0:
                total = total + cfg.omega * trip
            opt.zero_grad()
            total.backward()
            opt.step()
            for key, val in (("recon", recon), ("triplet", trip), ("kl", kl), ("total", total)):
                sums[key] += val.item()
            n_batches += 1
        model.epoch += 1
        row = {k: v / max(n_batches, 1) for k, v in sums.items()}
        row["epoch"] = model.epoch
        model.history.append(row)
        log.info("frame epoch %d recon %.5f triplet %.4f total %.4f",
                 model.epoch, row["recon"], row["triplet"], row["total"])
    model.eval()
    return model


def temporal_order_fraction(features: Sequence[np.ndarray], near: int = 1, far: int = 5) -> float:
    """Share of (k, k+near, k+far) triples whose nearer frame is nearer in feature space."""
    hits = total = 0
    for z in features:
        z = np.asarray(z, dtype=np.float64)
        m = len(z)
        if m <= far:
            continue
        k = np.arange(m - far)
        d_near = np.linalg.norm(z[k] - z[k + near], axis=1)
        d_far = np.linalg.norm(z[k] - z[k + far], axis=1)
        hits += int(np.sum(d_near < d_far))
        total += len(k)
    return hits / total if total else float("nan")


def save_frame_model(model: FrameVAE, path) -> None:
    params = OrderedDict((k, v.detach().numpy()) for k, v in model.state_dict().items())
    meta = {"kind": "frame_codec", "pixels": model.pixels, "d_f": model.d_f,
            "channels": list(model.channels), "epoch": model.epoch,
            "history": model.history,
            "config": asdict(model.config) if model.config else None}
    write_checkpoint(path, params, meta)


def load_frame_model(path) -> FrameVAE:
    params, meta = read_checkpoint(path)
    if meta.get("kind") != "frame_codec":
        raise ValueError(f"{path} is not a frame codec checkpoint")
    model = FrameVAE(meta["pixels"], meta["d_f"], meta["channels"])
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    model.epoch, model.history = meta["epoch"], meta["history"]
    if meta.get("config"):
        model.config = FrameCodecConfig(**meta["config"])
    model.eval()
    return model
