import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glmae.errors import IncompatibleCheckpointError, ShapeMismatchError, TokenizationError
from glmae.evaluation import (
    FinetuneConfig,
    Segmenter,
    dice,
    eval_segmenter,
    finetune,
    label_fraction_sweep,
    label_subset,
    predict_volume,
    save_segmenter,
    split_indices,
)
from glmae.pretrain import PretrainConfig, train
from glmae.vit3d import EncoderConfig, ProjectionConfig

ENC = EncoderConfig(embed_dim=16, depth=1, num_heads=2, patch_size=8, base_grid_dims=2)


def ft(**kw):
    base = dict(encoder=ENC, steps=3, batch_size=2, crop_size=16, lr=1e-3, test_fraction=0.25)
    base.update(kw)
    return FinetuneConfig(**base)


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory, small_volumes):
    out = tmp_path_factory.mktemp("pt") / "run"
    cfg = PretrainConfig.desk(encoder=ENC, projection=ProjectionConfig(hidden_dim=32, out_dim=16), q=2,
                              max_steps=2, checkpoint_every=0, out_dir=str(out))
    train(cfg, small_volumes)
    return out / "final"


def test_dice_examples():
    pred = np.array([0, 1, 1, 0])
    gt = np.array([0, 1, 0, 1])
    per, mean = dice(pred, gt, 2)
    assert per == [50.0] and mean == 50.0
    per, mean = dice(np.array([1, 1, 0]), np.array([1, 0, 0]), 3)
    assert per[0] == pytest.approx(200 / 3) and math.isnan(per[1]) and mean == pytest.approx(66.67, abs=0.01)
    with pytest.raises(ShapeMismatchError):
        dice(pred, gt[:3], 2)


@given(arrays(np.int64, 30, elements=st.integers(0, 3)), arrays(np.int64, 30, elements=st.integers(0, 3)))
def test_dice_symmetric_and_bounded(a, b):
    pa, _ = dice(a, b, 4)
    pb, _ = dice(b, a, 4)
    assert np.allclose(pa, pb, equal_nan=True)
    assert all(math.isnan(x) or 0 <= x <= 100 for x in pa)
    self_mean = dice(a, a, 4)[1]
    assert self_mean == 100.0 or math.isnan(self_mean)


def test_dice_relabel_invariance():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 3, 200)
    pred = np.where(rng.random(200) < 0.7, gt, rng.integers(0, 3, 200))
    swap = np.array([0, 2, 1])
    per, mean = dice(pred, gt, 3)
    per2, mean2 = dice(swap[pred], swap[gt], 3)
    assert per2 == per[::-1] and mean2 == pytest.approx(mean)


def test_split_and_subset():
    train, test = split_indices(20)
    assert len(test) == 4 and sorted(train + test) == list(range(20))
    assert split_indices(20) == (train, test)
    assert split_indices(20, split_seed=1) != (train, test)
    assert len(label_subset(train, 0.1)) == 2  # ceil(1.6)
    subsets = [label_subset(train, f) for f in (0.25, 0.5, 1.0)]
    assert subsets[0] == subsets[1][: len(subsets[0])] and subsets[1] == subsets[2][: len(subsets[1])]
    with pytest.raises(ValueError):
        label_subset(train, 0.0)
    with pytest.raises(ValueError):
        split_indices(1)


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(mode="probe")
    assert FinetuneConfig(encoder=ENC.to_dict()).encoder == ENC


def test_segmenter_shapes_and_tiling():
    torch.manual_seed(0)
    model = Segmenter(ENC, 3)
    assert model(torch.zeros(2, 16, 16, 16)).shape == (2, 3, 16, 16, 16)
    data = np.random.default_rng(0).random((32, 16, 16), dtype=np.float32)
    pred = predict_volume(model, data, 16)
    assert pred.shape == (32, 16, 16)
    # each tile is predicted independently
    assert np.array_equal(pred[16:], predict_volume(model, data[16:], 16))
    with pytest.raises(TokenizationError):
        predict_volume(model, data[:20], 16)


def test_linear_freezes_encoder_e2e_changes_it(tiny_ckpt, small_labeled):
    from glmae.evaluation import encoder_from_checkpoint

    _, arrays_ = encoder_from_checkpoint(tiny_ckpt)
    for mode, should_change in (("linear", False), ("e2e", True)):
        rep, model = finetune(tiny_ckpt, small_labeled, ft(mode=mode), return_model=True)
        changed = any(
            not np.array_equal(p.detach().numpy(), arrays_["student.encoder." + n])
            for n, p in model.encoder.named_parameters()
        )
        assert changed == should_change
        assert rep.n_test == 1 and rep.n_train == 3 and rep.checkpoint_id == str(tiny_ckpt)
        assert len(rep.per_class) == 2 and 0 <= rep.mean_dice <= 100


def test_finetune_deterministic_and_baseline(small_labeled):
    a = finetune(None, small_labeled, ft())
    b = finetune(None, small_labeled, ft())
    assert a.to_json() == b.to_json() and a.checkpoint_id is None
    assert set(json.loads(a.to_json())) >= {"per_class", "mean_dice", "config", "split_hash", "label_fraction"}


def test_incompatible_checkpoint(tiny_ckpt, small_labeled):
    with pytest.raises(IncompatibleCheckpointError):
        finetune(tiny_ckpt, small_labeled, ft(encoder=replace(ENC, embed_dim=32, num_heads=4)))


def test_label_fraction_sweep(small_labeled):
    reps = label_fraction_sweep(None, small_labeled, ft(steps=1), (0.25, 0.5, 1.0))
    assert [r.n_train for r in reps] == [1, 2, 3]
    assert len({r.split_hash for r in reps}) == 1
    assert [r.label_fraction for r in reps] == [0.25, 0.5, 1.0]


def test_segmenter_save_and_eval(tmp_path, small_labeled, tiny_ckpt):
    rep, model = finetune(tiny_ckpt, small_labeled, ft(), return_model=True)
    path = save_segmenter(model, rep, tmp_path / "seg")
    again = eval_segmenter(path, small_labeled)
    assert again.mean_dice == pytest.approx(rep.mean_dice, abs=1e-9) and again.split_hash == rep.split_hash
    with pytest.raises(IncompatibleCheckpointError):
        eval_segmenter(tiny_ckpt, small_labeled)


def test_convergence_compare_layout(tmp_path, small_labeled):
    from glmae.evaluation import convergence_compare

    cfg = PretrainConfig.desk(encoder=ENC, projection=ProjectionConfig(hidden_dim=32, out_dim=16), q=2,
                              batch_size=2, checkpoint_every=0)
    rows = convergence_compare(cfg, small_labeled, [1, 2], ft(steps=1), seeds=(0,), out_dir=tmp_path / "cmp")
    assert [(r["mode"], r["epoch"]) for r in rows] == [("glmae", 1), ("glmae", 2), ("mae3d", 1), ("mae3d", 2)]
    assert len({r["split_hash"] for r in rows}) == 1
    with open(tmp_path / "cmp" / "convergence.csv") as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == ["mode", "epoch", "mean_dice", "seed"] and len(got) == 4
    assert (tmp_path / "cmp" / "convergence.png").stat().st_size > 0
    splits = json.loads((tmp_path / "cmp" / "splits.json").read_text())
    assert splits["split_hash"] == rows[0]["split_hash"]
