import numpy as np
import pytest
import torch

from fd import fd_relative_error, leaf
from resar.attention import DeformableCrossAttention
from resar.config import LossConfig
from resar.encoders import VFEBlock
from resar.heads import dice_loss, residual_loss
from resar.model import ResarBEV, accumulated_stage_maps
from resar.raf import CompressNet
from test_raf import micro_config, micro_inputs

TOL = 1e-3


def cross_attention_error():
    torch.manual_seed(0)
    attn = DeformableCrossAttention(4, heads=2, levels=1, points=2).double()
    with torch.no_grad():
        attn.attention_weights.weight.normal_(0, 0.3)
        attn.sampling_offsets.weight.normal_(0, 0.1)
        attn.sampling_offsets.bias.uniform_(-0.4, 0.4)
    query = leaf(torch.randn(1, 1, 4))
    feat = leaf(torch.randn(1, 1, 4, 2, 3))
    uv = torch.tensor([[[[7.3, 5.1]]]], dtype=torch.float64)      # image 8x12 -> feature 2x3
    cam = torch.zeros(1, 1, 1, dtype=torch.long)
    valid = torch.ones(1, 1, 1, dtype=torch.bool)
    offsets = attn.sampling_offsets.bias

    def fn(q, f, o):
        return attn(q, uv, cam, valid, [f], (8, 12))

    return fd_relative_error(fn, [query, feat, offsets])


def vfe_error():
    torch.manual_seed(1)
    blk = VFEBlock(3, 4).double()
    with torch.no_grad():
        blk.score.weight.normal_()
    x = leaf(torch.randn(2, 5, 3))
    mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)

    def fn(x, w):
        out, p_max, p_attn = blk(x, mask, return_pooled=True)
        return torch.cat([out.flatten(), p_attn.flatten()])

    return fd_relative_error(fn, [x, blk.score.weight])


def compress_error():
    torch.manual_seed(2)
    net = CompressNet(2, 5).double()
    f = leaf(torch.randn(1, 2, 4, 5, 4))
    return fd_relative_error(lambda f, w: net(f), [f, net.reduce.weight])


def dice_error():
    rng = np.random.default_rng(3)
    logits = leaf(torch.tensor(rng.normal(size=(2, 3, 4, 4))))
    gt = torch.tensor(rng.random((2, 3, 4, 4)) > 0.5, dtype=torch.float64)
    w = torch.tensor([0.5, 1.0, 1.5], dtype=torch.float64)
    return fd_relative_error(lambda x: dice_loss(x, gt, w)[None], [logits])


def residual_loss_error():
    rng = np.random.default_rng(4)
    a = leaf(torch.tensor(rng.normal(size=(2, 3, 4, 4))))
    b = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
    worst = 0.0
    for norm in ("l1", "l2", "smooth_l1"):
        for red in ("spatial", "channel"):
            cfg = LossConfig(residual_norm=norm, reduction=red)
            worst = max(worst, fd_relative_error(lambda x: residual_loss(x, b, cfg)[None], [a]))
    return worst


def gated_accumulation_error():
    torch.manual_seed(5)
    tps = [leaf(torch.randn(1, 2, s, s)) for s in (2, 4, 8, 16)]
    theta = leaf(torch.randn(3, 2))
    return fd_relative_error(lambda *xs: accumulated_stage_maps(list(xs[:4]), xs[4])[-1], tps + [theta])


GRADIENT_CASES = {
    "cross_attention": cross_attention_error,
    "vfe_block": vfe_error,
    "compress_voxels": compress_error,
    "dice_loss": dice_error,
    "residual_loss": residual_loss_error,
    "gated_accumulation": gated_accumulation_error,
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_matches_central_differences(name):
    assert GRADIENT_CASES[name]() < TOL


def test_whole_model_jacobian_spot_check():
    cfg = micro_config(Z=16, X=16, D=8, ncam=1, image_size=(32, 48))
    torch.manual_seed(6)
    model = ResarBEV(cfg).double()
    batch = micro_inputs(cfg, dtype=torch.float64)
    raf = model.raf
    with torch.no_grad():
        # at the midpoint drift the top layer sits at camera height and projects onto the horizon
        # row, a pixel centre of the coarsest map where bilinear sampling has a kink
        raf.height.drift_logit.normal_()
    params = [raf.g_res_logit, raf.height.drift_logit, raf.pos_enc]

    def fn(*_):
        return model(batch).logits[0, :, 6:10, 6:10]

    assert fd_relative_error(fn, params) < 1e-2
