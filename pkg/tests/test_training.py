import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from resar.codec import CodecPretrainer
from resar.config import ConfigError, NumericalError
from resar.data import SceneDataset
from resar.geometry import BevGridSpec
from resar.plotting import plot_attention, plot_curves, plot_stage_panels
from resar.training import (
    Trainer, dump_attention, evaluate, load_checkpoint, save_checkpoint, stage_maps,
)


def _split(root, split, cfg):
    return SceneDataset(root, split, BevGridSpec.from_config(cfg.grid), cfg.seed).items


@pytest.fixture(scope="module")
def setup(tiny_data):
    cfg = tiny_config()
    train, val = _split(tiny_data, "train", cfg), _split(tiny_data, "val", cfg)
    pre = CodecPretrainer(torch.stack([it.gt for it in train]), cfg.codec, 0)
    pre.run(cfg.codec.steps)
    return cfg, train, val, pre.codec


def _params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_training_is_seed_deterministic(setup):
    cfg, train, _, codec = setup
    runs = []
    for _ in range(2):
        tr = Trainer(cfg, train, codec=codec)
        recs = [tr.train_step() for _ in range(2)]
        runs.append((recs, _params(tr.model)))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert torch.equal(runs[0][1][k], runs[1][1][k]), k


def test_resume_matches_uninterrupted_run(setup, tmp_path):
    cfg, train, _, codec = setup
    full = Trainer(cfg, train, codec=codec)
    full.run(3)
    part = Trainer(cfg, train, codec=codec)
    part.run(1)
    part.save(tmp_path)
    resumed = Trainer(cfg, train, codec=codec)
    resumed.load_resume_state(torch.load(tmp_path / "resume.pt"))
    resumed.run(2)
    a, b = _params(full.model), _params(resumed.model)
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_losses_are_logged_and_eval_records_appear(setup, tmp_path):
    cfg, train, val, codec = setup
    tr = Trainer(cfg, train, val, codec=codec, out_dir=tmp_path)
    tr.run(2)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert {r["split"] for r in lines} == {"batch", "train", "val"}
    batch = [r for r in lines if r["split"] == "batch"][0]
    for key in ("loss_stage1", "loss_stage4", "loss_seg", "loss_total", "miou"):
        assert np.isfinite(batch[key])
    w = cfg.loss
    expect = sum(s * batch[f"loss_stage{i + 1}"] for i, s in enumerate(w.stage_weights)) + w.seg_weight * batch["loss_seg"]
    assert batch["loss_total"] == pytest.approx(expect, rel=1e-5)


def test_residual_variant_requires_codec(setup):
    cfg, train, _, _ = setup
    with pytest.raises(ConfigError, match="codec"):
        Trainer(cfg, train)
    Trainer(cfg.replace(variant="end_to_end"), train)
    Trainer(cfg.replace(variant="pyramid_no_residual"), train)


def test_end_to_end_ignores_stage_losses(setup):
    cfg, train, _, _ = setup
    rec = Trainer(cfg.replace(variant="end_to_end"), train).train_step()
    assert all(rec[f"loss_stage{i}"] == 0 for i in range(1, 5))
    assert rec["loss_total"] == pytest.approx(cfg.loss.seg_weight * rec["loss_seg"], rel=1e-6)


def test_non_finite_loss_raises_numerical_error(setup):
    cfg, train, _, codec = setup
    tr = Trainer(cfg, train, codec=codec)
    with torch.no_grad():
        next(tr.model.parameters()).fill_(float("nan"))
    with pytest.raises(NumericalError):
        tr.train_step()


def test_checkpoint_round_trip(setup, tmp_path):
    cfg, train, val, codec = setup
    tr = Trainer(cfg, train, codec=codec)
    tr.run(1)
    save_checkpoint(tmp_path / "m.npz", tr.model, cfg, tr.step)
    model, cfg2, step = load_checkpoint(tmp_path / "m.npz")
    assert step == 1 and cfg2 == cfg
    r1, p1 = evaluate(tr.model, val, cfg)
    r2, p2 = evaluate(model, val, cfg2)
    assert np.array_equal(p1, p2)
    assert r1.miou_all == r2.miou_all
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.npz")


def test_stage_maps_and_panels(setup, tmp_path):
    cfg, train, val, codec = setup
    tr = Trainer(cfg, train, codec=codec)
    stages, probs, gt = stage_maps(tr.model, val, cfg, codec)
    assert stages.shape == (len(val), 4) + gt.shape[1:]
    assert probs.shape == gt.shape
    np.savez(tmp_path / "stage_maps.npz", stages=stages, probs=probs, gt=gt)
    paths = plot_stage_panels(tmp_path / "stage_maps.npz", tmp_path / "fig")
    assert len(paths) == len(val) and all(p.exists() for p in paths)


def test_attention_dump_and_overlay(setup, tmp_path):
    cfg, train, val, codec = setup
    tr = Trainer(cfg, train, codec=codec)
    cells = [(20, 16), (5, 30)]
    dump = dump_attention(tr.model, val[0], cells, cfg, tmp_path / "attention.npz")
    nl = len(cfg.raf.height_layers_m)
    assert dump["s0_l0_cam_idx"].shape[0] == nl * len(cells)
    w = dump["s3_l0_lvl0_weight"]
    assert np.all(w >= 0)
    # each query's attention weights over views, levels and points sum to one when any view is valid
    lv = 0
    total = 0
    while f"s3_l0_lvl{lv}_weight" in dump:
        total = total + dump[f"s3_l0_lvl{lv}_weight"].sum(axis=(2, 3))
        lv += 1
    has_view = dump["s3_l0_valid"].any(axis=1)
    np.testing.assert_allclose(total[has_view], 1.0, atol=1e-5)
    paths = plot_attention(tmp_path / "attention.npz", tmp_path / "fig")
    assert paths and all(p.exists() for p in paths)


def test_metric_curves(setup, tmp_path):
    cfg, train, val, codec = setup
    tr = Trainer(cfg, train, val, codec=codec, out_dir=tmp_path)
    tr.run(2)
    drawn = plot_curves(tmp_path / "metrics.jsonl", tmp_path / "curves.png")
    assert (tmp_path / "curves.png").exists()
    assert drawn["val"] == [2]
