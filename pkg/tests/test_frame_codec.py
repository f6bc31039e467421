import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import assert_close_rel, central_gradient
from drivecluster.frame_codec import (FrameCodecConfig, TripletIndex, TripletIndexError,
                                      build_model, decode_frame, encode_frame, encode_frames,
                                      load_frame_model, reconstruction_loss, sample_triplets,
                                      weighted_reconstruction_loss,
                                      save_frame_model, temporal_order_fraction, train_frame_model,
                                      triplet_loss)
from drivecluster.render import SparseFrames

P = 17


def tiny_model(**kw):
    return build_model(P, FrameCodecConfig(d_f=6, channels=(4, 8), **kw))


def blob_sequences(n_seq=3, m=12, seed=0):
    """Sequences of a single bright square drifting across a small grid."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_seq):
        frames = np.zeros((m, 4, P, P), dtype=np.float32)
        r, c, dr = rng.integers(2, 8), rng.integers(2, 8), rng.choice([-1, 1])
        for k in range(m):
            rr = int(np.clip(r + dr * (k // 2), 0, P - 3))
            frames[k, 0, rr:rr + 3, c:c + 3] = 1.0
            frames[k, 3, :, 8] = 0.5
        out.append(SparseFrames.from_dense(frames))
    return out


def mse_oracle(x, y):
    total, count = 0.0, 0
    for a, b in zip(x.reshape(-1).tolist(), y.reshape(-1).tolist()):
        total += (a - b) ** 2
        count += 1
    return total / count


def triplet_oracle(za, zp, zn, zo, alpha):
    def sq(u, v):
        return sum((a - b) ** 2 for a, b in zip(u, v))
    terms = []
    for a, p, n, o in zip(za, zp, zn, zo):
        terms.append(max(0.0, sq(a, p) - sq(a, n) + alpha) + max(0.0, sq(a, p) - sq(a, o) + alpha))
    return sum(terms) / len(terms)


def test_encode_shapes_and_determinism():
    model = tiny_model()
    img = blob_sequences(1)[0].dense([0])[0]
    z1 = encode_frame(model, img)
    assert z1.shape == (6,)
    np.testing.assert_array_equal(z1, encode_frame(model, img))
    np.testing.assert_array_equal(z1, encode_frame(model, img.copy()))
    back = decode_frame(model, z1)
    assert back.shape == img.shape
    assert np.isfinite(decode_frame(model, np.zeros(6))).all()


def test_sampled_mode_differs_and_is_seedable():
    model = tiny_model()
    img = blob_sequences(1)[0].dense([0])[0]
    a = encode_frame(model, img, "sampled", torch.Generator().manual_seed(1))
    b = encode_frame(model, img, "sampled", torch.Generator().manual_seed(1))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, encode_frame(model, img))


def test_shape_errors():
    model = tiny_model()
    with pytest.raises(ValueError):
        encode_frame(model, np.zeros((4, P + 1, P + 1)))
    with pytest.raises(ValueError):
        decode_frame(model, np.zeros(5))
    with pytest.raises(ValueError):
        reconstruction_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_encode_frames_matches_single():
    model = tiny_model()
    seq = blob_sequences(1)[0]
    batch = encode_frames(model, seq, batch=5)
    for k in (0, 7, 11):
        np.testing.assert_allclose(batch[k], encode_frame(model, seq.dense([k])[0]), atol=1e-6)


def test_reconstruction_loss_examples():
    ones = torch.ones(2, 4, 3, 3)
    assert reconstruction_loss(ones, ones).item() == 0.0
    assert reconstruction_loss(ones, torch.zeros_like(ones)).item() == 1.0


def weighted_mse_oracle(x, y, fg):
    num = den = 0.0
    for idx in np.ndindex(*x.shape):
        w = 1.0 + (fg if idx[1] < 3 and x[idx] != 0 else 0.0)
        num += w * (x[idx] - y[idx]) ** 2
        den += w
    return num / den


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 50.0]))
def test_weighted_reconstruction_matches_loop_oracle(seed, fg):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 3, 3)) * (rng.random((2, 4, 3, 3)) < 0.3)
    y = rng.normal(size=x.shape)
    got = weighted_reconstruction_loss(torch.from_numpy(x), torch.from_numpy(y), fg).item()
    assert got == pytest.approx(weighted_mse_oracle(x, y, fg), abs=1e-9)


def test_weighted_reconstruction_zero_weight_is_plain_mse():
    x, y = torch.randn(3, 4, 5, 5), torch.randn(3, 4, 5, 5)
    assert weighted_reconstruction_loss(x, y, 0.0).item() == reconstruction_loss(x, y).item()


@given(st.integers(0, 2**32 - 1))
def test_reconstruction_loss_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=3))
    x, y = rng.normal(size=shape), rng.normal(size=shape)
    got = reconstruction_loss(torch.from_numpy(x), torch.from_numpy(y)).item()
    assert got == pytest.approx(mse_oracle(x, y), abs=1e-6)


def test_triplet_identical_features_gives_two_alpha():
    z = torch.ones(3, 4)
    assert triplet_loss(z, z, z, z, alpha=0.7).item() == pytest.approx(1.4)


def test_triplet_inactive_hinge():
    a = torch.zeros(2, 3)
    far = torch.full((2, 3), 1.0)  # distance^2 = 3 >= alpha
    assert triplet_loss(a, a, far, far, alpha=1.0).item() == 0.0


def test_triplet_hand_case():
    za = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
    zp = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)   # d2 = 1
    zn = torch.tensor([[0.0, 1.0, 1.0]], dtype=torch.float64)   # d2 = 2
    zo = torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64)   # d2 = 0.25
    # max(0, 1 - 2 + 1) + max(0, 1 - 0.25 + 1) = 0 + 1.75
    assert triplet_loss(za, zp, zn, zo, 1.0).item() == pytest.approx(1.75, abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_triplet_matches_loop_oracle(seed, alpha):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(1, 6), rng.integers(1, 5)
    zs = [rng.normal(size=(n, d)) for _ in range(4)]
    got = triplet_loss(*map(torch.from_numpy, zs), alpha).item()
    assert got == pytest.approx(triplet_oracle(*[z.tolist() for z in zs], alpha), abs=1e-9)


def test_triplet_index_constraints():
    bad_order = TripletIndex(*[np.array([v]) for v in (0, 5, 2, 6, 1, 5)])
    with pytest.raises(TripletIndexError):
        bad_order.validate()
    same_seq = TripletIndex(*[np.array([v]) for v in (0, 5, 6, 10, 0, 6)])
    with pytest.raises(TripletIndexError):
        same_seq.validate()
    z = torch.zeros(1, 2)
    with pytest.raises(TripletIndexError):
        triplet_loss(z, z, z, z, index=same_seq)


@given(st.lists(st.integers(2, 30), min_size=2, max_size=6), st.integers(0, 1000))
def test_sampled_triplets_satisfy_constraints(lengths, seed):
    idx = sample_triplets(lengths, 4, np.random.default_rng(seed))
    idx.validate()
    lengths = np.array(lengths)
    assert np.all(idx.anchor < lengths[idx.seq]) and np.all(idx.negative < lengths[idx.seq])
    assert np.all(idx.other_frame < lengths[idx.other_seq])
    assert np.all(np.abs(idx.anchor - idx.positive) == 1)


def test_single_sequence_rejected():
    with pytest.raises(TripletIndexError, match="triplet negatives unavailable"):
        train_frame_model(blob_sequences(1), FrameCodecConfig(d_f=4, channels=(4,), epochs=1))


class ToyEncoder(torch.nn.Module):
    """Linear 4 -> 2 encoder (8 weights + 2 biases = 10 parameters)."""

    def __init__(self):
        super().__init__()
        self.lin = torch.nn.Linear(4, 2).double()

    def forward(self, x):
        return self.lin(x)


def _param_vector(model):
    return np.concatenate([p.detach().numpy().ravel() for p in model.parameters()])


def _set_params(model, vec):
    with torch.no_grad():
        s = 0
        for p in model.parameters():
            p.copy_(torch.from_numpy(vec[s:s + p.numel()].reshape(p.shape)))
            s += p.numel()


def _grad_check(loss_of_model, model):
    assert sum(p.numel() for p in model.parameters()) == 10
    model.zero_grad()
    loss_of_model(model).backward()
    analytic = np.concatenate([p.grad.numpy().ravel() for p in model.parameters()])

    def f(vec):
        _set_params(model, vec)
        with torch.no_grad():
            return loss_of_model(model).item()
    base = _param_vector(model)
    numeric = central_gradient(f, base)
    _set_params(model, base)
    assert_close_rel(analytic, numeric, 1e-4)


def test_recon_gradient_vs_finite_differences():
    torch.manual_seed(0)
    enc = ToyEncoder()
    dec = torch.randn(2, 4, dtype=torch.float64)
    x = torch.randn(6, 4, dtype=torch.float64)
    _grad_check(lambda m: reconstruction_loss(x, m(x) @ dec), enc)


def test_triplet_gradient_vs_finite_differences():
    torch.manual_seed(1)
    enc = ToyEncoder()
    xs = [torch.randn(5, 4, dtype=torch.float64) for _ in range(4)]
    # large margin keeps every hinge active, away from the kink
    _grad_check(lambda m: triplet_loss(*[m(x) for x in xs], alpha=50.0), enc)


def test_training_reduces_loss_and_is_reproducible(tmp_path):
    data = blob_sequences(4, 12)
    cfg = FrameCodecConfig(d_f=6, channels=(4, 8), epochs=6, batch=8, anchors_per_sequence=6, seed=3)
    torch.set_num_threads(1)
    a = train_frame_model(data, cfg)
    b = train_frame_model(data, cfg)
    assert a.history[-1]["total"] < a.history[0]["total"]
    assert a.history == b.history
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    save_frame_model(a, tmp_path / "f.ckpt")
    c = load_frame_model(tmp_path / "f.ckpt")
    np.testing.assert_array_equal(encode_frames(a, data[0]), encode_frames(c, data[0]))
    assert c.history == a.history and c.config == cfg


def test_trained_recon_beats_zero_predictor():
    train = blob_sequences(6, 12, seed=0)
    held = blob_sequences(3, 12, seed=99)
    cfg = FrameCodecConfig(d_f=6, channels=(4, 8), epochs=25, batch=16, anchors_per_sequence=6, lr=3e-3)
    model = train_frame_model(train, cfg)
    x = np.concatenate([s.dense() for s in held])
    with torch.no_grad():
        mu, _ = model.encode(torch.from_numpy(x))
        recon = model.decode(mu).numpy()
    assert np.mean((recon - x) ** 2) < np.mean(x ** 2)


def test_omega_zero_excludes_triplet_from_objective():
    data = blob_sequences(3, 10)
    cfg = FrameCodecConfig(d_f=4, channels=(4,), epochs=2, batch=8, omega=0.0)
    model = train_frame_model(data, cfg)
    for row in model.history:
        assert row["total"] == pytest.approx(row["recon"] + cfg.kl_weight * row["kl"], rel=1e-5)
        assert row["triplet"] > 0


def test_reference_defaults():
    cfg = FrameCodecConfig()
    assert (cfg.omega, cfg.alpha, cfg.lr) == (1.0, 1.0, 1e-3)


def test_odd_grid_round_trip_shape():
    model = build_model(129, FrameCodecConfig())
    out = model.decode(torch.zeros(1, 64))
    assert tuple(out.shape) == (1, 4, 129, 129)


@given(arrays(np.float64, (12, 3), elements=st.floats(-5, 5)))
def test_order_fraction_bounds(z):
    frac = temporal_order_fraction([z])
    assert 0.0 <= frac <= 1.0


def test_order_fraction_linear_drift_is_one():
    z = np.arange(20.0)[:, None] * np.ones((1, 3))
    assert temporal_order_fraction([z]) == 1.0
    assert np.isnan(temporal_order_fraction([z[:5]]))
