import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from resar.codec import (
    CodecPretrainer, GtCodec, TokenMapPyramid, down, gated_terms, level_shapes, load_codec, reconstruct,
    save_codec, up,
)
from resar.config import CodecConfig, ConfigError
from resar.heads import soft_dice

torch.set_default_dtype(torch.float32)


def cubic_weight(t, a=-0.75):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_oracle(img: np.ndarray, H: int, W: int) -> np.ndarray:
    """Separable Keys cubic resampling with half-pixel centres and clamped borders."""
    h, w = img.shape

    def axis_matrix(n_out, n_in):
        M = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for o in range(n_out):
            src = (o + 0.5) * scale - 0.5
            base = int(np.floor(src))
            for k in range(base - 1, base + 3):
                M[o, min(max(k, 0), n_in - 1)] += cubic_weight(src - k)
        return M

    return axis_matrix(H, h) @ img @ axis_matrix(W, w).T


def random_masks(rng, n, C=7, Z=64, X=64):
    # blocky masks so the pyramid has structure at every level
    coarse = rng.random((n, C, Z // 4, X // 4)) < 0.3
    return torch.as_tensor(coarse.repeat(4, axis=2).repeat(4, axis=3), dtype=torch.float64)


def randomized_codec(seed, kernel=3):
    torch.manual_seed(seed)
    codec = GtCodec(7, kernel_size=kernel).double()
    with torch.no_grad():
        for p in codec.parameters():
            p.add_(torch.randn_like(p) * 0.5)
    return codec


# -- down / up --------------------------------------------------------------------

def test_down_preserves_constants():
    conv = GtCodec(3).down_convs[0]
    x = torch.full((1, 3, 16, 16), 0.7)
    np.testing.assert_allclose(down(x, (4, 4), conv).detach().numpy(), 0.7, atol=1e-6)


def test_down_checkerboard_pools_to_half():
    board = torch.tensor(np.indices((4, 4)).sum(0) % 2, dtype=torch.float32)[None, None]
    out = down(board, (2, 2), GtCodec(1).down_convs[0])
    np.testing.assert_allclose(out.detach().numpy(), 0.5)


def test_down_matches_window_mean_oracle():
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    conv = GtCodec(1).double().down_convs[0]
    out = down(x, (2, 2), conv).detach().numpy()[0, 0]
    a = x.numpy()[0, 0]
    oracle = np.array([[a[4 * i:4 * i + 4, 4 * j:4 * j + 4].mean() for j in range(2)] for i in range(2)])
    np.testing.assert_allclose(out, oracle, atol=1e-6)


def test_down_rejects_non_integer_ratio():
    with pytest.raises(ConfigError):
        down(torch.zeros(1, 1, 10, 10), (3, 3))


def test_up_constant_and_identity():
    x = torch.full((2, 4, 5), 0.7)
    np.testing.assert_allclose(up(x, (16, 20)).numpy(), 0.7, atol=1e-6)
    y = torch.randn(2, 4, 5)
    assert up(y, (4, 5)) is y


@pytest.mark.parametrize("shape", [((8, 8), (64, 64)), ((4, 6), (16, 24)), ((16, 16), (32, 32))])
def test_up_matches_bicubic_oracle(shape):
    (h, w), (H, W) = shape
    x = np.random.default_rng(h * w).normal(size=(h, w))
    out = up(torch.tensor(x)[None], (H, W))[0].numpy()
    np.testing.assert_allclose(out, bicubic_oracle(x, H, W), atol=1e-9)


def test_up_resample_consistency_for_smooth_input():
    h = w = 16
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    smooth = np.sin(yy / h * np.pi) * np.cos(xx / w * np.pi / 2)
    big = up(torch.tensor(smooth)[None], (64, 64))[0].numpy()
    # source centre (i + 0.5) lands between fine pixels 4i+1 and 4i+2
    back = 0.25 * (big[1::4, 1::4] + big[1::4, 2::4] + big[2::4, 1::4] + big[2::4, 2::4])
    np.testing.assert_allclose(back[2:-2, 2:-2], smooth[2:-2, 2:-2], atol=1e-3)


# -- decomposition ------------------------------------------------------------------

def test_zero_mask_gives_zero_pyramid():
    dec = GtCodec(7).decompose(torch.zeros(7, 64, 64))
    for tp in dec.pyramid.levels:
        assert torch.count_nonzero(tp) == 0
    assert torch.count_nonzero(dec.gt_hat) == 0


def test_level_shapes():
    assert level_shapes(64, 64) == [(8, 8), (16, 16), (32, 32), (64, 64)]
    dec = GtCodec(7).decompose(torch.zeros(2, 7, 64, 32))
    assert [tuple(t.shape[-2:]) for t in dec.pyramid.levels] == level_shapes(64, 32)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_telescoping_identity_property(seed):
    gt = random_masks(np.random.default_rng(seed), 2)
    dec = randomized_codec(seed).decompose(gt)
    total = dec.residual.clone()
    for term in dec.terms:
        total = total + term
    assert (total - gt).abs().max().item() <= 1e-6


def test_reconstruct_equals_gt_minus_residual_plus_last():
    gt = random_masks(np.random.default_rng(3), 2)
    dec = randomized_codec(3).decompose(gt)
    rec = reconstruct(dec.pyramid)
    expected = gt - dec.residual + dec.pyramid.levels[-1]
    assert (rec - expected).abs().max().item() <= 1e-6
    np.testing.assert_allclose(rec.detach().numpy(), dec.gt_hat.detach().numpy(), atol=1e-12)


def test_gate_shutoff_leaves_last_level():
    levels = [torch.randn(3, s, s, dtype=torch.float64).tanh() for s in (8, 16, 32, 64)]
    pyr = TokenMapPyramid(levels, torch.full((3, 3), -1e4, dtype=torch.float64))
    np.testing.assert_allclose(reconstruct(pyr).numpy(), levels[-1].numpy(), atol=1e-12)


def test_reconstruct_matches_summation_oracle():
    rng = np.random.default_rng(5)
    levels = [np.tanh(rng.normal(size=(2, s, s))) for s in (8, 16, 32, 64)]
    theta = rng.normal(size=(3, 2))
    pyr = TokenMapPyramid([torch.tensor(t) for t in levels], torch.tensor(theta))
    oracle = levels[-1].copy()
    for i in range(3):
        for c in range(2):
            g = 1 / (1 + np.exp(-theta[i, c]))
            oracle[c] += g * bicubic_oracle(levels[i][c], 64, 64)
    np.testing.assert_allclose(reconstruct(pyr).numpy(), oracle, atol=1e-6)
    assert len(gated_terms(pyr)) == 3


def test_token_maps_bounded():
    gt = random_masks(np.random.default_rng(9), 3)
    dec = randomized_codec(9).decompose(gt)
    for tp in dec.pyramid.levels:
        assert tp.abs().max() < 1


def test_decompose_rejects_non_binary():
    with pytest.raises(ValueError):
        GtCodec(7).decompose(torch.full((7, 64, 64), 0.5))


def test_frozen_codec_is_deterministic():
    codec = randomized_codec(1).float()
    gt = random_masks(np.random.default_rng(1), 2).float()
    a, b = codec.decompose(gt), codec.decompose(gt)
    for x, y in zip(a.pyramid.levels, b.pyramid.levels):
        assert torch.equal(x, y)


# -- pretraining ------------------------------------------------------------------

def test_zero_steps_keep_initialization():
    masks = random_masks(np.random.default_rng(0), 4).float()
    tr = CodecPretrainer(masks, CodecConfig(steps=0), seed=0)
    init = GtCodec(7)
    tr.run(0)
    for p, q in zip(tr.codec.parameters(), init.parameters()):
        assert torch.equal(p, q)


def test_pretraining_trend_decreases(mask_bank):
    masks = mask_bank[:32]
    tr = CodecPretrainer(masks, CodecConfig(steps=500), seed=0)
    losses = np.array(tr.run(500))
    windows = losses.reshape(5, 100).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_pretraining_resume_is_exact():
    masks = random_masks(np.random.default_rng(2), 16).float()
    full = CodecPretrainer(masks, CodecConfig(), seed=4)
    full.run(20)
    part = CodecPretrainer(masks, CodecConfig(), seed=4)
    part.run(8)
    state = part.state_dict()
    resumed = CodecPretrainer(masks, CodecConfig(), seed=4)
    resumed.load_state_dict(state)
    resumed.run(12)
    assert resumed.losses == full.losses
    for p, q in zip(full.codec.parameters(), resumed.codec.parameters()):
        assert torch.equal(p, q)


def test_codec_checkpoint_round_trip(tmp_path):
    codec = randomized_codec(7).float()
    save_codec(tmp_path / "codec.npz", codec)
    back = load_codec(tmp_path / "codec.npz")
    gt = random_masks(np.random.default_rng(7), 1).float()
    for x, y in zip(codec.decompose(gt).pyramid.levels, back.decompose(gt).pyramid.levels):
        assert torch.equal(x, y)
    with pytest.raises(FileNotFoundError):
        load_codec(tmp_path / "nope.npz")


def test_dice_of_perfect_reconstruction_is_zero():
    gt = random_masks(np.random.default_rng(0), 2).float()
    assert soft_dice(gt, gt).item() == pytest.approx(0.0, abs=1e-6)
