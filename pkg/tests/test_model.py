import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from forgeloc.model import (
    BackboneConfig,
    CheckpointError,
    HeadUninitializedError,
    build_model,
    identity_projections,
    load_checkpoint,
    save_checkpoint,
)

TINY = BackboneConfig(channels=(8, 8, 16, 16), contrast_dim=8, head_hidden=16)


@pytest.fixture(scope="module")
def model():
    return build_model(TINY, seed=0)


def _img(size=64, seed=0):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


def _equal(p, q):
    return all(torch.equal(a, b) for a, b in zip(p, q))


def test_pyramid_shapes_for_512():
    m = build_model(BackboneConfig(), 0)
    with torch.no_grad():
        pyr = m.forward_backbone(_img(512), "eval")
    shapes = [tuple(g.shape[2:]) + (g.shape[1],) for g in pyr]
    assert shapes == [(128, 128, 32), (64, 64, 64), (32, 32, 128), (16, 16, 256)]


@settings(max_examples=5, deadline=None)
@given(st.integers(1, 4))
def test_stride_arithmetic(k):
    m = build_model(TINY, 0)
    size = 32 * k
    with torch.no_grad():
        pyr = m.forward_backbone(_img(size), "eval")
    assert [g.shape[-1] for g in pyr] == [size // s for s in (4, 8, 16, 32)]


def test_rejects_bad_input_sizes(model):
    with pytest.raises(ValueError):
        model.forward_backbone(np.zeros((64, 96, 3), np.float32))
    with pytest.raises(ValueError):
        model.forward_backbone(np.zeros((48, 48, 3), np.float32))
    with pytest.raises(ValueError):
        model.forward_backbone(_img(), "predict")


def test_eval_is_deterministic_train_depends_on_seed(model):
    x = _img()
    flag = model.training
    with torch.no_grad():
        assert _equal(model.forward_backbone(x, "eval"), model.forward_backbone(x, "eval"))
        a = model.forward_backbone(x, "train", 1)
        assert _equal(a, model.forward_backbone(x, "train", 1))
        assert not _equal(a, model.forward_backbone(x, "train", 2))
    assert model.training == flag


def test_forward_dual(model):
    x = _img()
    before = model.checksums()
    with torch.no_grad():
        p, q = model.forward_dual(x, 5)
        assert not _equal(p, q)
        p, q = model.forward_dual(x, 5, sub_seeds=(9, 9))
        assert _equal(p, q)
    assert model.checksums() == before
    plain = build_model(BackboneConfig(dropout_rate=0.0, channels=(8, 8, 8, 8)), 0)
    with pytest.raises(ValueError):
        plain.forward_dual(x, 0)
    with torch.no_grad():
        assert _equal(*plain.forward_dual(x, 0, allow_identical=True))


def test_projection_shapes_and_identity():
    m = build_model(BackboneConfig(channels=(8, 8, 8, 8), contrast_dim=8), 0)
    with torch.no_grad():
        pyr = m.forward_backbone(_img(), "eval")
        identity_projections(m)
        assert _equal(m.project_for_contrast(pyr), pyr)
    big = build_model(BackboneConfig(channels=(8, 8, 16, 16), contrast_dim=128), 0)
    with torch.no_grad():
        z = big.project_for_contrast(big.forward_backbone(_img(), "eval"))
    assert all(g.shape[1] == 128 for g in z)
    with pytest.raises(ValueError):
        identity_projections(big)


def test_contrast_gradients_reach_backbone_and_projections(model):
    z = model.project_for_contrast(model.forward_backbone(_img(), "train", 0))
    sum(g.square().mean() for g in z).backward()
    for part in ("backbone", "projections"):
        norm = sum(p.grad.norm() ** 2 for p in model.part(part).parameters() if p.grad is not None)
        assert norm > 0
    assert all(p.grad is None for p in model.head.parameters())
    model.zero_grad(set_to_none=True)


def test_head_output_contract():
    m = build_model(TINY, 1)
    with torch.no_grad():
        pyr = m.forward_backbone(_img(), "eval")
        probs = m.forward_head(pyr)
        assert probs.shape == (1, 64, 64)
        assert probs.min() >= 0 and probs.max() <= 1
        for p in m.head.parameters():
            p.zero_()
        assert torch.all(m.forward_head(pyr) == 0.5)
        assert m.forward_head(pyr, out_size=(40, 48)).shape == (1, 40, 48)
    m.head_ready = False
    with pytest.raises(HeadUninitializedError):
        m.forward_head(pyr)


def test_frozen_backbone_gets_no_gradient():
    m = build_model(TINY, 2)
    m.set_trainable("backbone", False)
    probs = m.forward_head(m.forward_backbone(_img(), "eval"))
    probs.mean().backward()
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in m.backbone.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.head.parameters())


def _steps(m, n=10):
    opt = torch.optim.Adam(m.parameters(), lr=1e-2)
    x = _img(seed=3)
    target = torch.zeros(1, 64, 64)
    for i in range(n):
        pyr = m.forward_backbone(x, "train", i)
        loss = m.forward_head(pyr).mean() + sum(g.mean() for g in m.project_for_contrast(pyr)) * 0.0
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            opt.step()
    return target


def test_set_trainable_groups():
    m = build_model(TINY, 3)
    before = m.checksums()
    m.set_trainable("backbone", False)
    _steps(m)
    after = m.checksums()
    assert after["backbone"] == before["backbone"]
    assert after["head"] != before["head"]

    m2 = build_model(TINY, 3)
    for part in ("backbone", "projections", "head"):
        m2.set_trainable(part, False)
    before = m2.checksums()
    _steps(m2)
    assert m2.checksums() == before

    m3 = build_model(TINY, 3)
    m3.set_trainable("backbone", False)
    m3.set_trainable("projections", False)
    before = m3.checksums()
    _steps(m3)
    changed = {k for k, v in m3.checksums().items() if v != before[k]}
    assert changed == {"head"}

    with pytest.raises(ValueError):
        m.set_trainable("neck", True)


def test_build_model_seeded():
    assert build_model(TINY, 4).checksums() == build_model(TINY, 4).checksums()
    assert build_model(TINY, 4).checksums() != build_model(TINY, 5).checksums()


def test_checkpoint_round_trip(tmp_path):
    m = build_model(TINY, 6)
    path = save_checkpoint(tmp_path / "s2.ckpt", m, 2, {"seed": 6, "note": "x"})
    ck = load_checkpoint(path)
    assert ck.stage == 2 and ck.meta == {"seed": 6, "note": "x"}
    assert ck.model.checksums() == m.checksums()
    for (k, a), (_, b) in zip(sorted(m.state_dict().items()), sorted(ck.model.state_dict().items())):
        assert torch.equal(a, b), k
    s1 = load_checkpoint(save_checkpoint(tmp_path / "s1.ckpt", m, 1))
    assert not s1.model.head_ready
    assert s1.model.checksums()["backbone"] == m.checksums()["backbone"]


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    torch.save({"format": "other"}, tmp_path / "x.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_backbone_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(size="huge")
    with pytest.raises(ValueError):
        BackboneConfig(dropout_rate=1.0)
    base = build_model(BackboneConfig(size="base"), 0)
    small = build_model(BackboneConfig(size="small"), 0)
    count = lambda m: sum(p.numel() for p in m.backbone.parameters())
    assert count(base) > count(small)
