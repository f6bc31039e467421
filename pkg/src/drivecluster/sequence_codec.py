"""Recurrent sequence autoencoder over frame features.

A GRU encoder maps a variable-length run of frame features to one sequence
feature. Two autoregressive GRU decoders, seeded with that feature, roll out
(a) the input in reverse order and (b) the frames interleaved with the input.
Training alternates an E-step (recompute all sequence features, rebuild
neighbour sets by k-NN and repeated k-means) with gradient steps on the
reconstruction/prediction loss plus the local aggregation loss.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_sequence

from .clustering import kmeans
from .tensorio import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)


class SequenceTooShortError(ValueError):
    pass


class HeadDisabledError(ValueError):
    pass


@dataclass
class SeqCodecConfig:
    d_s: int = 128
    hidden: int = 128
    layers: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch: int = 256
    epochs: int = 200
    la_ratio: float = 1e-4
    tau: float = 0.07
    k_bg: int = 100
    cluster_counts: tuple = (50, 100, 150, 200)
    cluster_union: bool = True
    use_reconstruction: bool = True
    use_prediction: bool = True
    reverse_recon_order: bool = True
    pair_mode: str = "interleaved"
    stride: int = 1
    # share of each sequence's frames drawn afresh every epoch before pairing; 1 keeps them all
    subsample: float = 1.0
    seed: int = 0
    stage: int = 2

    def __post_init__(self):
        self.cluster_counts = tuple(int(c) for c in self.cluster_counts)
        if self.pair_mode not in ("interleaved", "split"):
            raise ValueError(f"unknown pair mode {self.pair_mode!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


# ---------------------------------------------------------------- training pairs


@dataclass
class TrainingPair:
    input_idx: np.ndarray
    recon_idx: np.ndarray
    pred_idx: np.ndarray
    input_steps: Optional[np.ndarray] = None
    recon_target: Optional[np.ndarray] = None
    pred_target: Optional[np.ndarray] = None


def pair_indices(length: int, mode: str = "interleaved", stride: int = 1,
                 reverse: bool = True) -> TrainingPair:
    if stride < 1:
        raise ValueError("stride must be positive")
    if length < 2 * stride:
        raise SequenceTooShortError(f"sequence of {length} steps is shorter than 2*stride={2 * stride}")
    if mode == "interleaved":
        inp = np.arange(0, length - stride, 2 * stride)
        pred = inp + stride
    elif mode == "split":
        half = length // 2
        inp, pred = np.arange(half), np.arange(half, length)
    else:
        raise ValueError(f"unknown pair mode {mode!r}")
    recon = inp[::-1].copy() if reverse else inp.copy()
    return TrainingPair(inp, recon, pred)


def make_training_pairs(z_seq, mode: str = "interleaved", stride: int = 1,
                        reverse: bool = True) -> TrainingPair:
    z = np.asarray(z_seq)
    pair = pair_indices(len(z), mode, stride, reverse)
    pair.input_steps = z[pair.input_idx]
    pair.recon_target = z[pair.recon_idx]
    pair.pred_target = z[pair.pred_idx]
    return pair


# ---------------------------------------------------------------- model


class _Decoder(nn.Module):
    def __init__(self, d_f: int, d_s: int, hidden: int, layers: int):
        super().__init__()
        self.layers, self.hidden = layers, hidden
        self.init = nn.Linear(d_s, layers * hidden)
        self.start = nn.Parameter(torch.zeros(d_f))
        self.gru = nn.GRU(d_f, hidden, layers, batch_first=True)
        self.out = nn.Linear(hidden, d_f)

    def forward(self, y: torch.Tensor, steps: int) -> torch.Tensor:
        b = y.shape[0]
        h = torch.tanh(self.init(y)).view(b, self.layers, self.hidden).transpose(0, 1).contiguous()
        inp = self.start.expand(b, -1)
        outs = []
        for _ in range(steps):
            o, h = self.gru(inp[:, None, :], h)
            inp = self.out(o[:, 0])
            outs.append(inp)
        if not outs:
            return y.new_zeros((b, 0, self.start.shape[0]))
        return torch.stack(outs, dim=1)


class SeqCodec(nn.Module):
    def __init__(self, d_f: int, cfg: SeqCodecConfig):
        super().__init__()
        self.d_f, self.d_s = d_f, cfg.d_s
        self.config = cfg
        self.encoder = nn.GRU(d_f, cfg.hidden, cfg.layers, batch_first=True)
        self.proj = nn.Linear(cfg.hidden, cfg.d_s)
        self.dec_recon = _Decoder(d_f, cfg.d_s, cfg.hidden, cfg.layers)
        self.dec_pred = _Decoder(d_f, cfg.d_s, cfg.hidden, cfg.layers)
        self.history: list[dict] = []
        self.epoch = 0

    @property
    def use_reconstruction(self) -> bool:
        return self.config.use_reconstruction

    @property
    def use_prediction(self) -> bool:
        return self.config.use_prediction

    def encode_padded(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.encoder(packed)
        return self.proj(h[-1])


def build_seq_model(d_f: int, cfg: SeqCodecConfig) -> SeqCodec:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return SeqCodec(d_f, cfg)


def encode_sequence(model: SeqCodec, input_steps, chunk: Optional[int] = None) -> np.ndarray:
    """Sequence feature of one run of frame features.

    With ``chunk`` set, the steps are fed in pieces while carrying the hidden
    state, which gives the same result as one pass.
    """
    x = torch.as_tensor(np.ascontiguousarray(input_steps, dtype=np.float32))
    if x.dim() != 2 or x.shape[0] == 0:
        raise SequenceTooShortError("encode_sequence needs at least one input step")
    if x.shape[1] != model.d_f:
        raise ValueError(f"steps have width {x.shape[1]}, model expects {model.d_f}")
    with torch.no_grad():
        if chunk is None:
            _, h = model.encoder(x[None])
        else:
            h = None
            for s in range(0, len(x), chunk):
                _, h = model.encoder(x[None, s:s + chunk], h)
        return model.proj(h[-1])[0].numpy()


def encode_sequences(model: SeqCodec, steps_list: Sequence[np.ndarray], batch: int = 256) -> np.ndarray:
    model.eval()
    out = np.zeros((len(steps_list), model.d_s), dtype=np.float32)
    with torch.no_grad():
        for s in range(0, len(steps_list), batch):
            chunk = [torch.as_tensor(np.ascontiguousarray(z, dtype=np.float32)) for z in steps_list[s:s + batch]]
            if any(len(c) == 0 for c in chunk):
                raise SequenceTooShortError("encode_sequence needs at least one input step")
            lengths = torch.tensor([len(c) for c in chunk])
            y = model.encode_padded(pad_sequence(chunk, batch_first=True), lengths)
            out[s:s + len(chunk)] = y.numpy()
    return out


def average_features(steps) -> np.ndarray:
    """Temporal mean pooling, the no-sequence-model ablation."""
    z = np.asarray(steps, dtype=np.float32)
    if len(z) == 0:
        raise SequenceTooShortError("cannot average an empty sequence")
    return z.mean(axis=0)


def run_decoders(model: SeqCodec, y, recon_len: int, pred_len: int):
    """Autoregressive rollouts of both heads; a disabled head yields an empty list."""
    if recon_len < 0 or pred_len < 0:
        raise ValueError("rollout lengths must be non-negative")
    if recon_len and not model.use_reconstruction:
        raise HeadDisabledError("reconstruction head is disabled")
    if pred_len and not model.use_prediction:
        raise HeadDisabledError("prediction head is disabled")
    yt = torch.as_tensor(np.asarray(y, dtype=np.float32))[None]
    with torch.no_grad():
        recon = list(model.dec_recon(yt, recon_len)[0].numpy()) if model.use_reconstruction else []
        pred = list(model.dec_pred(yt, pred_len)[0].numpy()) if model.use_prediction else []
    return recon, pred


# ---------------------------------------------------------------- losses


def _masked_mse(out: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if out.shape != target.shape:
        raise ValueError(f"length mismatch {tuple(out.shape)} vs {tuple(target.shape)}")
    sq = (out - target) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype)[..., None].expand_as(sq)
    return (sq * m).sum() / m.sum().clamp(min=1)


def rp_loss(recon_out, recon_target, pred_out, pred_target,
            recon_mask=None, pred_mask=None) -> torch.Tensor:
    """Reconstruction MSE plus prediction MSE; pass ``None`` for a missing head.

    Masks mark the valid (unpadded) steps of batched, padded rollouts.
    """
    total = None
    for out, tgt, mask in ((recon_out, recon_target, recon_mask), (pred_out, pred_target, pred_mask)):
        if out is None and tgt is None:
            continue
        if out is None or tgt is None:
            raise ValueError("output and target must both be given or both be None")
        term = _masked_mse(torch.as_tensor(out), torch.as_tensor(tgt), mask)
        total = term if total is None else total + term
    return total if total is not None else torch.zeros(())


def _as_tensor(a, dtype=None) -> torch.Tensor:
    t = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a))
    return t.to(dtype) if dtype is not None else t


def neighbor_probability(y, A, features, tau: float):
    """Probability mass that the temperature softmax of ``features @ y`` puts on index set ``A``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    idx = list(A)
    if not idx:
        raise ValueError("index set must be non-empty")
    feats = _as_tensor(features)
    yt = _as_tensor(y, feats.dtype)
    logits = feats @ yt / tau
    return torch.exp(torch.logsumexp(logits[idx], 0) - torch.logsumexp(logits, 0))


@dataclass
class NeighborSets:
    background: list  # B_i, k_bg nearest indices
    close: list       # C_i, co-cluster indices


def local_aggregation_loss(i: int, features, sets: NeighborSets, tau: float):
    """-log P(C_i u B_i | y_i) / P(B_i | y_i) with y_i = features[i]."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    B = [int(b) for b in sets.background[i]]
    if not B:
        raise ValueError(f"background set of instance {i} is empty")
    CB = sorted(set(B) | {int(c) for c in sets.close[i]})
    feats = _as_tensor(features)
    logits = feats @ feats[i] / tau
    return -(torch.logsumexp(logits[CB], 0) - torch.logsumexp(logits[B], 0))


def la_loss_batch(y: torch.Tensor, bank: torch.Tensor, rows: Sequence[int],
                  sets: NeighborSets, tau: float) -> torch.Tensor:
    """Mean local aggregation loss for unit features ``y`` of instances ``rows``
    against a constant feature bank."""
    n = bank.shape[0]
    logits = y @ bank.detach().T / tau
    in_b = torch.zeros(len(rows), n, dtype=torch.bool)
    in_cb = torch.zeros(len(rows), n, dtype=torch.bool)
    for r, i in enumerate(rows):
        b = torch.as_tensor(np.asarray(sets.background[i], dtype=np.int64))
        c = torch.as_tensor(np.asarray(sets.close[i], dtype=np.int64))
        in_b[r, b] = True
        in_cb[r, b] = True
        in_cb[r, c] = True
    neg = torch.finfo(logits.dtype).min
    lse_cb = torch.logsumexp(logits.masked_fill(~in_cb, neg), dim=1)
    lse_b = torch.logsumexp(logits.masked_fill(~in_b, neg), dim=1)
    return (lse_b - lse_cb).mean()


def build_neighbor_sets(features, k_bg: int, cluster_counts, seed: int,
                        union: bool = True) -> NeighborSets:
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if not 0 < k_bg < n:
        raise ValueError(f"need 0 < k_bg < N, got k_bg={k_bg}, N={n}")
    counts = list(cluster_counts)
    if not counts or any(not 1 <= c <= n for c in counts):
        raise ValueError(f"cluster counts {counts} must lie in [1, N={n}]")
    sq = (x ** 2).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    # stable sort: equal distances keep the lower index first
    background = [np.sort(np.argsort(d2[i], kind="stable")[:k_bg]) for i in range(n)]

    close_sets = None
    for r, k in enumerate(counts):
        labels = kmeans(x, k, seed=seed + r, n_init=3).labels
        member = [set(np.flatnonzero(labels == labels[i]).tolist()) for i in range(n)]
        if close_sets is None:
            close_sets = member
        elif union:
            close_sets = [a | b for a, b in zip(close_sets, member)]
        else:
            close_sets = [a & b for a, b in zip(close_sets, member)]
    close = [np.array(sorted(s), dtype=np.int64) for s in close_sets]
    return NeighborSets(background, close)


# ---------------------------------------------------------------- training


def _unit(y: torch.Tensor) -> torch.Tensor:
    return y / y.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def _length_buckets(lengths: Sequence[int], batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = np.argsort(np.asarray(lengths), kind="stable")
    buckets = [order[s:s + batch] for s in range(0, len(order), batch)]
    return [buckets[i] for i in rng.permutation(len(buckets))]


def epoch_views(lengths: Sequence[int], cfg: SeqCodecConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Sorted frame indices each sequence contributes this epoch.

    With ``subsample < 1`` a uniform random subset is drawn, so the model
    sees irregularly spaced frames like those of the derived siblings it is
    evaluated on.
    """
    views = []
    for m in lengths:
        if cfg.subsample >= 1:
            views.append(np.arange(m))
            continue
        n = min(m, max(2 * cfg.stride, int(round(cfg.subsample * m))))
        views.append(np.sort(rng.choice(m, n, replace=False)))
    return views


def batch_loss(model: SeqCodec, z_list: Sequence[torch.Tensor], pairs: Sequence[TrainingPair]):
    """rp loss and the (un-normalised) sequence features of one padded batch."""
    inputs = [z[p.input_idx] for z, p in zip(z_list, pairs)]
    lengths = torch.tensor([len(v) for v in inputs])
    y = model.encode_padded(pad_sequence(inputs, batch_first=True), lengths)
    recon_out = recon_tgt = recon_mask = None
    pred_out = pred_tgt = pred_mask = None
    if model.use_reconstruction:
        tgts = [z[p.recon_idx] for z, p in zip(z_list, pairs)]
        recon_tgt = pad_sequence(tgts, batch_first=True)
        recon_out = model.dec_recon(y, recon_tgt.shape[1])
        recon_mask = pad_sequence([torch.ones(len(t), dtype=torch.bool) for t in tgts], batch_first=True)
    if model.use_prediction:
        tgts = [z[p.pred_idx] for z, p in zip(z_list, pairs)]
        pred_tgt = pad_sequence(tgts, batch_first=True)
        pred_out = model.dec_pred(y, pred_tgt.shape[1])
        pred_mask = pad_sequence([torch.ones(len(t), dtype=torch.bool) for t in tgts], batch_first=True)
    loss = rp_loss(recon_out, recon_tgt, pred_out, pred_tgt, recon_mask, pred_mask)
    return loss, y


def e_step(model: SeqCodec, feats: Sequence[np.ndarray], pairs: Sequence[TrainingPair],
           cfg: SeqCodecConfig, seed: int) -> tuple[torch.Tensor, NeighborSets]:
    y = encode_sequences(model, [z[p.input_idx] for z, p in zip(feats, pairs)])
    bank = _unit(torch.from_numpy(y))
    sets = build_neighbor_sets(bank.numpy(), cfg.k_bg, cfg.cluster_counts, seed, cfg.cluster_union)
    return bank, sets


def train_sequence_model(features: Sequence[np.ndarray], cfg: SeqCodecConfig,
                         model: Optional[SeqCodec] = None) -> SeqCodec:
    """Fit the sequence autoencoder on precomputed per-sequence frame features.

    Optimises mean rp loss + la_ratio * mean local aggregation loss; the
    E-step runs once per epoch and only when la_ratio > 0.
    """
    feats = [np.asarray(f, dtype=np.float32) for f in features]
    n = len(feats)
    if cfg.la_ratio > 0 and n <= cfg.k_bg:
        raise ValueError(f"local aggregation needs more than k_bg={cfg.k_bg} sequences, got {n}")
    if not (cfg.use_reconstruction or cfg.use_prediction or cfg.la_ratio > 0):
        raise ValueError("nothing to train: both heads disabled and la_ratio == 0")
    d_f = feats[0].shape[1]
    if model is None:
        model = build_seq_model(d_f, cfg)
    model.config = cfg
    z_t = [torch.from_numpy(z) for z in feats]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    for _ in range(cfg.epochs):
        views = epoch_views([len(z) for z in feats], cfg, rng)
        pairs = [pair_indices(len(v), cfg.pair_mode, cfg.stride, cfg.reverse_recon_order) for v in views]
        bank = sets = None
        if cfg.la_ratio > 0:
            bank, sets = e_step(model, [z[v] for z, v in zip(feats, views)], pairs, cfg,
                                seed=int(rng.integers(2**31)))
        model.train()
        sums = {"rp": 0.0, "la": 0.0, "total": 0.0}
        nb = 0
        for rows in _length_buckets([len(p.input_idx) for p in pairs], cfg.batch, rng):
            rp, y = batch_loss(model, [z_t[i][views[i]] for i in rows], [pairs[i] for i in rows])
            total = rp
            la = torch.zeros(())
            if sets is not None:
                la = la_loss_batch(_unit(y), bank, rows.tolist(), sets, cfg.tau)
                total = total + cfg.la_ratio * la
            opt.zero_grad()
            total.backward()
            opt.step()
            sums["rp"] += rp.item()
            sums["la"] += la.item()
            sums["total"] += total.item()
            nb += 1
        model.epoch += 1
        row = {k: v / nb for k, v in sums.items()}
        row["epoch"] = model.epoch
        row["stage"] = cfg.stage
        model.history.append(row)
        log.info("seq epoch %d rp %.5f la %.4f", model.epoch, row["rp"], row["la"])
    model.eval()
    return model


def save_seq_model(model: SeqCodec, path) -> None:
    params = OrderedDict((k, v.detach().numpy()) for k, v in model.state_dict().items())
    meta = {"kind": "sequence_codec", "d_f": model.d_f, "epoch": model.epoch,
            "history": model.history, "config": asdict(model.config)}
    write_checkpoint(path, params, meta)


def load_seq_model(path) -> SeqCodec:
    params, meta = read_checkpoint(path)
    if meta.get("kind") != "sequence_codec":
        raise ValueError(f"{path} is not a sequence codec checkpoint")
    model = SeqCodec(meta["d_f"], SeqCodecConfig(**meta["config"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    model.epoch, model.history = meta["epoch"], meta["history"]
    model.eval()
    return model
