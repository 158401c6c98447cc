from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmoetrack import autodiff as ad
from dmoetrack.autodiff import Tensor, gradient_check
from dmoetrack.errors import ConfigError, NumericError, ValidationError
from dmoetrack.tracker import (COMPONENTS, LossWeights, ModelConfig, TrackerModel, classification_loss, compute_losses,
                               gaussian_center_map, hanning_window, iou_loss, l1_loss, maybe_update_template,
                               predict_box, task_loss, total_loss)

TINY = ModelConfig(dim=16, heads=2, blocks=1, experts=4, top_k=2, rank=4, patch=4, search_size=8,
                   template_size=8, spatial_kernel=3)


def images(rng, b, size, c=3):
    return rng.normal(size=(b, c, size, size)), rng.normal(size=(b, c, size, size))


def test_forward_shapes_and_determinism(rng):
    model = TrackerModel(ModelConfig(), seed=0)
    t, s = images(rng, 2, 16), images(rng, 2, 32)
    out = model(t, s, np.array([0, 1]))
    assert out.score_map.shape == (2, 4, 4)
    assert out.box_map().shape == (2, 4, 4, 4)
    assert out.task_logits.shape == (2, 4)
    assert len(out.layers) == 2
    assert np.all((out.score_map >= 0) & (out.score_map <= 1))
    again = model(t, s, np.array([0, 1]))
    assert out.score_logits.data.tobytes() == again.score_logits.data.tobytes()


def test_forward_rgb_only_substitution(rng):
    model = TrackerModel(TINY, seed=1)
    t, s = images(rng, 1, 8), images(rng, 1, 8)
    a = model((t[0], None), (s[0], None))
    b = model((t[0], t[0]), (s[0], s[0]))
    assert a.score_logits.data.tobytes() == b.score_logits.data.tobytes()


def test_forward_masked_modality_finite(rng):
    model = TrackerModel(ModelConfig(), seed=0)
    t, s = images(rng, 2, 16), images(rng, 2, 32)
    out = model((t[0], np.zeros_like(t[1])), (s[0], np.zeros_like(s[1])))
    for arr in (out.score_logits.data, out.offsets.data, out.sizes.data, out.task_logits.data):
        assert np.all(np.isfinite(arr))


def test_forward_rejects_bad_shapes(rng):
    model = TrackerModel(TINY, seed=0)
    with pytest.raises(ConfigError):
        model(images(rng, 1, 8), images(rng, 1, 16))
    with pytest.raises(ConfigError):
        model(images(rng, 1, 8), images(rng, 1, 8), task_ids=[7])


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(search_size=30).validate()
    with pytest.raises(ConfigError):
        ModelConfig(rank=32).validate()
    with pytest.raises(ConfigError):
        LossWeights(giou=-1)


def test_zeroed_banks_reduce_to_plain_transformer(rng):
    cfg = ModelConfig()
    model = TrackerModel(cfg, seed=3)
    ref = TrackerModel(ModelConfig(use_dmoe=False), seed=3)
    for block in model.blocks:
        for e in block.ffn.t_experts + block.ffn.m_experts:
            e.w_up.data[...] = 0
    t, s = images(rng, 2, 16), images(rng, 2, 32)
    a, b = model(t, s), ref(t, s)
    np.testing.assert_allclose(a.score_logits.data, b.score_logits.data, atol=1e-10, rtol=0)
    np.testing.assert_allclose(a.sizes.data, b.sizes.data, atol=1e-10, rtol=0)


# -- losses ---------------------------------------------------------------------

def test_gaussian_map_peak():
    m = gaussian_center_map(np.array([[0.6, 0.1]]), 4)
    assert m.shape == (1, 4, 4)
    assert m[0, 0, 2] == 1.0 and m.max() == 1.0
    assert m[0, 1, 2] == pytest.approx(math.exp(-0.5))


def test_classification_loss_examples():
    gt = np.zeros((1, 3, 3))
    gt[0, 1, 1] = 1.0
    assert classification_loss(gt.copy(), gt).item() < 1e-6
    # per-pixel oracle for uniform 0.5 prediction
    pred = np.full((1, 3, 3), 0.5)
    total = 0.0
    for i in range(3):
        for j in range(3):
            if gt[0, i, j] == 1:
                total += -(0.5 ** 2) * math.log(0.5)
            else:
                total += -((1 - gt[0, i, j]) ** 4) * (0.5 ** 2) * math.log(0.5)
    assert classification_loss(pred, gt).item() == pytest.approx(total / 9, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_classification_loss_nonnegative(seed):
    r = np.random.default_rng(seed)
    gt = gaussian_center_map(r.uniform(size=(2, 2)), 4)
    assert classification_loss(r.uniform(size=(2, 4, 4)), gt).item() >= 0


def test_iou_loss_examples():
    box = np.array([0.5, 0.5, 0.2, 0.3])
    assert iou_loss(box, box).item() == pytest.approx(0.0, abs=1e-15)
    assert iou_loss(np.array([0.0, 0, 1, 1]), np.array([1.0, 0, 2, 1]), fmt="xyxy").item() == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        iou_loss(box, np.array([0.5, 0.5, 0.0, 0.3]))
    with pytest.raises(ValidationError):
        iou_loss(np.array([0.0, 0, 1, 1]), np.array([1.0, 1, 1, 2]), fmt="xyxy")


def giou_oracle(p, g):
    px0, py0, px1, py1 = p
    gx0, gy0, gx1, gy1 = g
    inter = max(0.0, min(px1, gx1) - max(px0, gx0)) * max(0.0, min(py1, gy1) - max(py0, gy0))
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    hull = (max(px1, gx1) - min(px0, gx0)) * (max(py1, gy1) - min(py0, gy0))
    return inter / union - (hull - union) / hull


def test_iou_loss_matches_geometric_oracle():
    r = np.random.default_rng(0)
    for _ in range(200):
        p0, g0 = r.uniform(0, 1, size=2), r.uniform(0, 1, size=2)
        p = np.concatenate([p0, p0 + r.uniform(0.05, 1, size=2)])
        g = np.concatenate([g0, g0 + r.uniform(0.05, 1, size=2)])
        loss = iou_loss(p, g, fmt="xyxy").item()
        assert loss == pytest.approx(1 - giou_oracle(p, g), abs=1e-10)
        assert 0 <= loss <= 2


def test_l1_examples(rng):
    gt = rng.uniform(size=4)
    assert l1_loss(gt, gt).item() == 0.0
    assert l1_loss(gt + np.array([0.1, 0, 0, 0]), gt).item() == pytest.approx(0.025, abs=1e-15)
    a, b = rng.normal(size=4), rng.normal(size=4)
    assert l1_loss(a, b).item() == l1_loss(b, a).item()


def test_task_loss_examples():
    assert task_loss(np.array([50.0, 0, 0, 0]), 0).item() < 1e-12
    assert task_loss(np.zeros(4), 2).item() == pytest.approx(math.log(4), abs=1e-15)
    assert task_loss(np.array([[0.3, -1.0, 2.0]]), [1]).item() >= 0
    with pytest.raises(ValidationError):
        task_loss(np.zeros(4), 4)


def test_total_loss_composition():
    ones = {name: 1.0 for name in COMPONENTS}
    assert abs(total_loss(ones, LossWeights()).item() - 10.11) <= 1e-12
    assert total_loss({name: 0.0 for name in COMPONENTS}).item() == 0.0


def test_total_loss_linearity():
    rng = np.random.default_rng(0)
    w = LossWeights()
    coef = {"class": 1, "giou": w.giou, "l1": w.l1, "task": 1, "dis": w.dis, "cluster": w.cluster,
            "balance": w.balance}
    base = {name: float(v) for name, v in zip(COMPONENTS, rng.uniform(size=len(COMPONENTS)))}
    ref = total_loss(base, w).item()
    for name in COMPONENTS:
        bumped = dict(base, **{name: base[name] + 0.25})
        assert total_loss(bumped, w).item() - ref == pytest.approx(0.25 * coef[name], abs=1e-12)


def test_total_loss_names_nan_component():
    comps = {name: 1.0 for name in COMPONENTS}
    comps["cluster"] = float("nan")
    with pytest.raises(NumericError, match="cluster"):
        total_loss(comps)


# -- inference rules ------------------------------------------------------------

def test_hanning_window_values():
    win = hanning_window(5)
    assert win[2, 2] == 1.0
    assert np.all(win[0] == 0) and np.all(win[:, -1] == 0)
    np.testing.assert_array_equal(hanning_window(1), [[1.0]])
    blended = hanning_window(4, influence=0.5)
    assert blended.min() == 0.5


def test_predict_box_uniform_goes_to_center():
    scores = np.full((5, 5), 0.3)
    boxes = np.arange(100, dtype=float).reshape(5, 5, 4)
    box, conf, cell = predict_box(scores, boxes, hanning_window(5))
    assert cell == (2, 2) and conf == 0.3
    np.testing.assert_array_equal(box, boxes[2, 2])
    box, _, cell = predict_box(np.array([[0.4]]), np.ones((1, 1, 4)), hanning_window(1))
    assert cell == (0, 0) and np.all(box == 1)


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1), st.sampled_from([3, 5, 7]))
def test_hanning_keeps_center_argmax(seed, n):
    r = np.random.default_rng(seed)
    scores = r.uniform(0, 0.9, size=(n, n))
    scores[n // 2, n // 2] = 0.95
    _, _, cell = predict_box(scores, np.zeros((n, n, 4)), hanning_window(n))
    assert cell == (n // 2, n // 2)


def test_maybe_update_template():
    assert maybe_update_template(25, 0.9)
    assert not maybe_update_template(25, 0.5)
    assert not maybe_update_template(13, 0.99)
    assert not maybe_update_template(0, 0.99)
    assert not maybe_update_template(50, 0.7)


# -- gradients ------------------------------------------------------------------

def tiny_batch(rng, b=2):
    boxes = np.column_stack([rng.uniform(0.2, 0.8, size=(b, 2)), rng.uniform(0.2, 0.5, size=(b, 2))])
    return images(rng, b, 8), images(rng, b, 8), boxes, np.arange(b) % 4


def test_full_model_gradient_check():
    rng = np.random.default_rng(0)
    model = TrackerModel(TINY, seed=0)
    t, s, boxes, tasks = tiny_batch(rng)

    def f():
        out = model(t, s, tasks)
        return total_loss(compute_losses(out, boxes, tasks, TINY))

    err = gradient_check(f, model.parameters(), max_coords=6, rng=rng)
    assert err < 1e-3


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(1)
    model = TrackerModel(ModelConfig(), seed=0)
    t, s = images(rng, 4, 16), images(rng, 4, 32)
    boxes = np.column_stack([rng.uniform(0.3, 0.7, size=(4, 2)), np.full((4, 2), 0.25)])
    tasks = np.array([0, 1, 2, 3])
    out = model(t, s, tasks)
    total_loss(compute_losses(out, boxes, tasks, model.cfg)).backward()
    selected = {(i, bank, int(e)) for i, layer in enumerate(out.layers)
                for bank, gate in (("t", layer.gate_t), ("m", layer.gate_m)) for e in gate.selected.reshape(-1)}
    for name, p in model.named_parameters():
        parts = name.split(".")
        if "t_experts" in parts or "m_experts" in parts:
            block, bank, idx = int(parts[1]), parts[3][0], int(parts[4])
            if (block, bank, idx) not in selected:
                continue
        assert p.grad is not None and np.any(p.grad != 0), name
