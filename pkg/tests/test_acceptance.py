"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 5 and 6 train the desk-scale model and take tens of minutes on one core;
select the quick ones with ``-m "not slow"``.
"""
import itertools
import time

import numpy as np
import pytest
import torch

from conftest import synthetic_masks
from resar.codec import CodecPretrainer, GtCodec, up
from resar.config import CodecConfig, LossConfig, RunConfig
from resar.data import SceneDataset, aligned_radar
from resar.encoders import RadarEncoder, collate_radar, voxelize
from resar.geometry import BevGridSpec, HeightOffsetParams, adjusted_ground_height
from resar.heads import class_weights, total_loss
from resar.metrics import compute_iou, range_iou
from resar.model import ResarBEV
from resar.synthetic import SceneSpec, generate, generate_dataset, sample_seed
from resar.training import Trainer, evaluate
from test_gradients import GRADIENT_CASES, TOL
from test_raf import micro_inputs

OVERFIT_MAX_STEPS = 3000
OVERFIT_BUDGET_S = 30 * 60
ABLATION_STEPS = 500
ABLATION_BUDGET_S = 2 * 3600


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return report


def random_codec(seed):
    torch.manual_seed(seed)
    codec = GtCodec().double()
    with torch.no_grad():
        codec.gate_theta.normal_(0.0, 2.0)
        for conv in codec.down_convs:
            conv.weight.normal_(0.0, 0.5)
            conv.bias.normal_(0.0, 0.3)
    return codec


def test_1_telescoping_identity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    with torch.no_grad():
        for i in range(100):
            gt = torch.tensor(rng.random((7, 64, 64)) < rng.uniform(0.05, 0.6), dtype=torch.float64)
            codec = random_codec(i)
            out = codec.decompose(gt)
            total = out.residual.clone()
            for k in range(3):
                gate = torch.sigmoid(codec.gate_theta[k])[:, None, None]
                total += gate * up(out.pyramid.levels[k][None], (64, 64))[0]
            worst = max(worst, float((total - gt).abs().max()))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-6 and elapsed < 60, f"max |gt - (sum gated up(TP_i) + R_4)| = {worst:.2e} "
                                               f"(<= 1e-6) over 100 masks in {elapsed:.1f}s (< 60s)")


def test_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    errors = {name: fn() for name, fn in GRADIENT_CASES.items()}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(e < TOL for e in errors.values()) and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    verdict(2, ok, f"worst {worst} {errors[worst]:.2e} (< {TOL:g}); {detail}; {elapsed:.1f}s (< 300s)")


def test_3_pooling_symmetry(verdict):
    grid = BevGridSpec()
    sample = generate(SceneSpec.from_config(RunConfig().scene, sample_seed(3, 0)))
    rng = np.random.default_rng(3)
    # a scene's returns plus clusters that fill voxels with 2..12 points (over-full ones get subsampled)
    sizes = rng.integers(2, 13, size=120)
    centers = np.repeat(rng.uniform([-15, 0.2, -15], [15, 2.6, 15], size=(120, 3)), sizes, axis=0)
    cluster = np.column_stack([centers + rng.uniform(-0.04, 0.04, size=centers.shape), rng.normal(size=(len(centers), 3))])
    vox = voxelize(np.concatenate([aligned_radar(sample), cluster]), grid, seed=0)
    torch.manual_seed(3)
    enc = RadarEncoder(grid)
    batch = collate_radar([vox])
    with torch.no_grad():
        ref = enc(batch)
        same = 0
        for _ in range(50):
            perm = np.stack([rng.permutation(batch.points.shape[1]) for _ in range(batch.points.shape[0])])
            idx = torch.as_tensor(perm)
            shuffled = type(batch)(batch.coords, torch.gather(batch.points, 1, idx[..., None].expand(-1, -1, 6)),
                                   torch.gather(batch.mask, 1, idx), batch.batch_size)
            same += torch.equal(enc(shuffled), ref)
        # padded rows: extra all-padding rows plus garbage in every masked row
        extra = 4
        pts = torch.cat([batch.points, torch.randn(batch.points.shape[0], extra, 6) * 50], 1)
        mask = torch.cat([batch.mask, torch.zeros(batch.mask.shape[0], extra, dtype=torch.bool)], 1)
        pts = torch.where(mask[..., None], pts, torch.randn_like(pts) * 50)
        padded = enc(type(batch)(batch.coords, pts, mask, 1))
    pad_exact = torch.equal(padded, ref)
    multi = int((batch.mask.sum(1) > 1).sum())
    verdict(3, same == 50 and pad_exact,
            f"{same}/50 row permutations bit-identical over {batch.points.shape[0]} voxels ({multi} with >1 point); "
            f"add-pad with garbage rows exact: {pad_exact}")


def test_4_codec_pretraining(verdict):
    t0 = time.perf_counter()
    masks = synthetic_masks(64, seed=4)
    cfg = CodecConfig()
    runs = []
    for _ in range(2):
        pre = CodecPretrainer(masks, cfg, seed=4)
        pre.run(cfg.steps)
        runs.append(pre)
    loss = runs[0].evaluate()
    replay = runs[0].losses == runs[1].losses and all(
        torch.equal(a, b) for a, b in zip(runs[0].codec.state_dict().values(), runs[1].codec.state_dict().values()))
    elapsed = time.perf_counter() - t0
    ok = loss <= 0.05 and cfg.steps <= 2000 and replay and elapsed <= 600
    verdict(4, ok, f"reconstruction Dice {loss:.4f} (<= 0.05) after {cfg.steps} steps (<= 2000) on 64 masks; "
                   f"replay bit-identical: {replay}; {elapsed:.0f}s for both runs (<= 600s)")


def _desk_split(root, split, cfg, limit=None):
    return SceneDataset(root, split, BevGridSpec.from_config(cfg.grid), cfg.seed, limit)


def _codec_for(items, cfg):
    pre = CodecPretrainer(torch.stack([it.gt for it in items]), cfg.codec, cfg.seed)
    pre.run(cfg.codec.steps)
    return pre.codec.eval().requires_grad_(False)


@pytest.mark.slow
def test_5_overfit_one_batch(verdict, tmp_path):
    cfg = RunConfig().replace(**{"train.eval_every": 0})
    generate_dataset(tmp_path, 4, seed=5, scene_cfg=cfg.scene, grid_cfg=cfg.grid, val_count=0)
    ds = _desk_split(tmp_path, "train", cfg)
    codec = _codec_for(ds.items, cfg)
    t0 = time.perf_counter()
    tr = Trainer(cfg, ds.items, codec=codec, class_frequency=ds.class_frequency)
    miou = 0.0
    while tr.step < OVERFIT_MAX_STEPS and time.perf_counter() - t0 < OVERFIT_BUDGET_S:
        if tr.train_step()["miou"] >= 0.90:
            miou = evaluate(tr.model, ds.items, cfg)[0].miou_all
            if miou >= 0.90:
                break
    elapsed = time.perf_counter() - t0
    if miou < 0.90:
        miou = evaluate(tr.model, ds.items, cfg)[0].miou_all
    ok = miou >= 0.90 and tr.step <= OVERFIT_MAX_STEPS and elapsed <= OVERFIT_BUDGET_S
    verdict(5, ok, f"train mIoU {miou:.3f} (>= 0.90) at threshold {cfg.eval_threshold} after {tr.step} steps "
                   f"(<= {OVERFIT_MAX_STEPS}) in {elapsed / 60:.1f} min (<= 30)")


@pytest.mark.slow
def test_6_ablation_trend(verdict, tmp_path):
    t0 = time.perf_counter()
    base = RunConfig().replace(**{"train.eval_every": 0, "train.steps": ABLATION_STEPS})
    generate_dataset(tmp_path, 160, seed=6, scene_cfg=base.scene, grid_cfg=base.grid, val_count=32)
    train, val = _desk_split(tmp_path, "train", base), _desk_split(tmp_path, "val", base)
    codec = _codec_for(train.items, base)
    res = {}
    for variant in ("full", "end_to_end", "camera_only"):
        cfg = base.replace(variant=variant)
        tr = Trainer(cfg, train.items, codec=codec, class_frequency=train.class_frequency)
        tr.run(cfg.train.steps)
        res[variant] = {"val": 100 * evaluate(tr.model, val.items, cfg)[0].miou_all,
                        "train": 100 * evaluate(tr.model, train.items, cfg)[0].miou_all}
    elapsed = time.perf_counter() - t0
    full, e2e, cam = (res[v]["val"] for v in ("full", "end_to_end", "camera_only"))
    gap = {v: r["train"] - r["val"] for v, r in res.items()}
    ok = (full - e2e >= 1.0 and e2e - cam >= 1.0 and gap["end_to_end"] > gap["full"]
          and elapsed <= ABLATION_BUDGET_S)
    table = "; ".join(f"{v} val {r['val']:.1f} train {r['train']:.1f}" for v, r in res.items())
    verdict(6, ok, f"val mIoU full {full:.1f} >= e2e {e2e:.1f} >= camera {cam:.1f} with gaps >= 1 point; "
                   f"train-val gap e2e {gap['end_to_end']:.1f} > full {gap['full']:.1f}; [{table}]; "
                   f"{ABLATION_STEPS} steps each, {elapsed / 60:.0f} min (<= 120)")


def _iou_oracle(a, b):
    inter = union = 0
    for p, g in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += p and g
        union += p or g
    return 1.0 if union == 0 else inter / union


def _range_oracle(a, b, grid, near, far):
    zz, xx = grid.cell_centers()
    inter = union = 0
    for i, j in itertools.product(range(grid.z_cells), range(grid.x_cells)):
        if not near <= np.hypot(xx[i, j], zz[i, j]) < far:
            continue
        inter += a[i, j] and b[i, j]
        union += a[i, j] or b[i, j]
    return 1.0 if union == 0 else inter / union


def test_7_metric_oracle(verdict):
    rng = np.random.default_rng(7)
    grid = BevGridSpec(z_cells=32, x_cells=32, x_extent_m=(-8.0, 8.0), z_extent_m=(-8.0, 8.0))
    bins = [(0.0, 3.2), (3.2, 5.6), (5.6, 8.0), (2.0, 100.0)]
    iou_bad = range_bad = 0
    for k in range(1000):
        pa, pb = rng.uniform(0, 0.5, size=2) * (k % 10 != 0)       # every tenth pair is empty
        a, b = rng.random((32, 32)) < pa, rng.random((32, 32)) < pb
        iou_bad += compute_iou(a, b) != _iou_oracle(a, b)
        near, far = bins[k % len(bins)]
        range_bad += range_iou(a, b, grid, near, far) != _range_oracle(a, b, grid, near, far)
    verdict(7, iou_bad == 0 and range_bad == 0,
            f"compute_iou mismatches {iou_bad}/1000, range-interval IoU mismatches {range_bad}/1000 (exact equality)")


def test_8_formula_examples(verdict):
    ends = [adjusted_ground_height(HeightOffsetParams(1.0, d, -0.6, 0.6)) for d in (0.0, 1.0, 0.5)]
    ends_ok = ends == pytest.approx([0.4, 1.6, 1.0], abs=1e-12)
    rng = np.random.default_rng(8)
    w_ok = class_weights([0.8, 0.2]) == pytest.approx([0.4, 1.6], abs=1e-12)
    w_ok &= all(abs(class_weights(rng.random(7) * 0.99).mean() - 1.0) <= 1e-9 for _ in range(100))
    ones = [torch.tensor(1.0)] * 4
    tl = float(total_loss(ones, torch.tensor(1.0), LossConfig()))
    masks = synthetic_masks(16, seed=8)
    bounds = []
    for i in range(4):
        pyr = random_codec(100 + i).decompose(masks[4 * i:4 * i + 4].double()).pyramid
        bounds += [float(t.detach().abs().max()) for t in pyr.levels]
    tp_ok = max(bounds) < 1.0
    ok = ends_ok and w_ok and tl == 24.0 and tp_ok
    verdict(8, ok, f"height endpoints {ends} == [0.4, 1.6, 1.0]: {ends_ok}; class weights (0.4, 1.6) and mean 1: {w_ok}; "
                   f"total loss of ones {tl} == 24; max |TP| {max(bounds):.6f} < 1")


def test_9_shape_sweep(verdict):
    from test_raf import micro_config

    failures = []
    for Z, X, D, ncam in itertools.product((32, 64), (32, 64), (16, 32), (2, 6)):
        cfg = micro_config(Z=Z, X=X, D=D, ncam=ncam)
        torch.manual_seed(0)
        model = ResarBEV(cfg).eval()
        with torch.no_grad():
            out = model(micro_inputs(cfg))
        want = [(Z // f, X // f) for f in (8, 4, 2, 1)]
        got = [tuple(r.shape[-2:]) for r in out.raf.residuals]
        dec = [tuple(t.shape[-2:]) for t in out.tp_hat]
        if got != want or dec != want or tuple(out.logits.shape[-2:]) != (Z, X) or out.logits.shape[1] != 7:
            failures.append((Z, X, D, ncam, got, dec))
        if any(r.shape[1] != D for r in out.raf.residuals):
            failures.append((Z, X, D, ncam, "channels"))
    verdict(9, not failures, f"16 configs (Z, X in 32/64, D in 16/32, cameras 2/6): stage maps (Z/8, Z/4, Z/2, Z), "
                             f"decoder keeps spatial dims; failures: {failures or 'none'}")
