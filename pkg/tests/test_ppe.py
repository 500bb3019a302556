import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image

from limbvton.dataio import CLOTHING, LEFT_ARM, RIGHT_ARM, encode_parsing
from limbvton.layers import SEBlock
from limbvton.ppe import (
    CLASS_WEIGHTS,
    ParsingEstimator,
    ParsingNetwork,
    compose_nonlimb,
    export_parsing,
    loss_ppe,
    parsing_accuracy,
    predict_target_parsing,
)

from oracles import gradient_check


def _onehot(labels):
    return encode_parsing(torch.as_tensor(labels))


def _compose_oracle(labels, mask):
    out = labels.copy()
    for idx in np.ndindex(labels.shape):
        if labels[idx] in (CLOTHING, LEFT_ARM, RIGHT_ARM):
            out[idx] = 0
        if mask[idx] > 0.5:
            out[idx] = CLOTHING
    return out


def test_compose_self_consistent_without_limbs():
    rng = np.random.default_rng(0)
    labels = rng.choice([0, 1, 2, 3, 6], size=(12, 10))
    p = _onehot(labels)
    assert torch.equal(compose_nonlimb(p, p[CLOTHING : CLOTHING + 1]), p)


def test_compose_empty_mask_clears_clothing_and_arms():
    labels = np.array([[3, 4, 5], [1, 2, 6]])
    out = compose_nonlimb(_onehot(labels), torch.zeros(1, 2, 3))
    assert out[CLOTHING].sum() == 0
    assert out.argmax(0).tolist() == [[0, 0, 0], [1, 2, 6]]


def test_compose_matches_pixel_rule_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        h, w = rng.integers(1, 9, size=2)
        labels = rng.integers(0, 7, size=(h, w))
        mask = rng.random((1, h, w))
        out = compose_nonlimb(_onehot(labels), torch.from_numpy(mask).float())
        assert torch.equal(out.sum(0), torch.ones(h, w))
        assert out.argmax(0).numpy().tolist() == _compose_oracle(labels, mask[0]).tolist()
        assert torch.equal(out[CLOTHING], torch.from_numpy(mask[0] > 0.5).float())


def test_compose_batched_and_shape_errors():
    p = _onehot(np.zeros((4, 4), dtype=int)).expand(2, 7, 4, 4)
    assert compose_nonlimb(p, torch.ones(2, 1, 4, 4)).shape == (2, 7, 4, 4)
    with pytest.raises(ValueError):
        compose_nonlimb(p, torch.ones(2, 1, 4, 5))
    with pytest.raises(ValueError):
        compose_nonlimb(p[:, :6], torch.ones(2, 1, 4, 4))


def test_loss_uniform_background_is_log7():
    probs = torch.full((1, 7, 4, 5), 1 / 7, dtype=torch.float64)
    target = torch.zeros_like(probs)
    target[:, 0] = 1
    assert loss_ppe(probs, target).item() == pytest.approx(math.log(7), abs=1e-12)
    assert math.log(7) == pytest.approx(1.9459, abs=1e-4)


def test_loss_perfect_prediction_is_zero():
    target = _onehot(np.random.default_rng(2).integers(0, 7, size=(6, 5))).unsqueeze(0).double()
    assert loss_ppe(target, target).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_eps_clamp_keeps_it_finite():
    target = torch.zeros(1, 7, 2, 2)
    target[:, 3] = 1
    probs = torch.zeros(1, 7, 2, 2)
    probs[:, 0] = 1
    assert loss_ppe(probs, target).item() == pytest.approx(-3 * math.log(1e-8), rel=1e-5)


def test_loss_matches_elementwise_evaluation():
    rng = np.random.default_rng(3)
    logits = torch.from_numpy(rng.normal(size=(2, 7, 5, 4)))
    probs = torch.softmax(logits, 1)
    target = _onehot(rng.integers(0, 7, size=(5, 4))).double().unsqueeze(0).repeat(2, 1, 1, 1)
    w = rng.uniform(0.5, 3, size=7)
    total = 0.0
    for n, j, i, k in np.ndindex(2, 7, 5, 4):
        total += -w[j] * target[n, j, i, k].item() * math.log(max(probs[n, j, i, k].item(), 1e-8))
    assert loss_ppe(probs, target, tuple(w)).item() == pytest.approx(total / (2 * 5 * 4), rel=1e-10)


def test_loss_linear_in_weights():
    rng = np.random.default_rng(4)
    probs = torch.softmax(torch.from_numpy(rng.normal(size=(1, 7, 6, 6))), 1)
    target = _onehot(rng.integers(0, 7, size=(6, 6))).double().unsqueeze(0)
    base = list(CLASS_WEIGHTS)
    doubled = base.copy()
    doubled[3] *= 2
    only3 = [1e-300] * 7
    only3[3] = base[3]
    gain = loss_ppe(probs, target, doubled) - loss_ppe(probs, target, base)
    assert gain.item() == pytest.approx(loss_ppe(probs, target, only3).item(), rel=1e-9)
    assert gain.item() >= 0


def test_loss_gradient_wrt_logits():
    rng = np.random.default_rng(5)
    logits = torch.from_numpy(rng.normal(size=(1, 7, 4, 3)))
    target = _onehot(rng.integers(0, 7, size=(4, 3))).double().unsqueeze(0)
    fn = lambda z: loss_ppe(torch.softmax(z, 1), target, CLASS_WEIGHTS)  # noqa: E731
    assert gradient_check(fn, logits, n_coords=12) <= 1e-3


def test_loss_rejects_bad_weights():
    p = torch.full((1, 7, 2, 2), 1 / 7)
    with pytest.raises(ValueError):
        loss_ppe(p, p, (1.0,) * 6)
    with pytest.raises(ValueError):
        loss_ppe(p, p, (1.0,) * 6 + (0.0,))


def test_se_block_is_a_gate():
    torch.manual_seed(0)
    se = SEBlock(8)
    x = torch.randn(2, 8, 5, 5)
    g = se.gate(x)
    assert g.shape == (2, 8, 1, 1)
    assert (g > 0).all() and (g < 1).all()
    assert torch.allclose(se(x), x * g)


def _inputs(n=2, h=64, w=64):
    gen = torch.Generator().manual_seed(0)
    onehot = lambda: F.one_hot(torch.randint(0, 7, (n, h, w), generator=gen), 7).permute(0, 3, 1, 2).float()  # noqa: E731
    return dict(nonlimb_parsing=onehot(), occluded_person=torch.rand(n, 3, h, w, generator=gen),
                occluded_parsing=onehot(), keypoint_map=torch.rand(n, 18, h, w, generator=gen),
                warped_cloth=torch.rand(n, 3, h, w, generator=gen),
                warped_mask=(torch.rand(n, 1, h, w, generator=gen) > 0.5).float())


@pytest.mark.parametrize("use_mask", [True, False])
def test_untrained_predictor_outputs_simplex(use_mask):
    torch.manual_seed(0)
    net = ParsingNetwork(base=4, use_mask=use_mask).eval()
    x = _inputs()
    probs = predict_target_parsing(net, **{k: v for k, v in x.items() if use_mask or k != "warped_mask"})
    assert probs.shape == (2, 7, 64, 64)
    assert torch.isfinite(probs).all() and (probs >= 0).all()
    assert torch.allclose(probs.sum(1), torch.ones(2, 64, 64), atol=1e-5)


def test_predictor_needs_mask_when_configured():
    x = _inputs()
    del x["warped_mask"]
    with pytest.raises(ValueError):
        predict_target_parsing(ParsingNetwork(base=4), **x)


def test_accuracy_and_export(tmp_path):
    labels = np.array([[0, 3, 3], [4, 5, 6]])
    p = _onehot(labels).unsqueeze(0)
    assert parsing_accuracy(p, p) == 1.0
    q = p.clone()
    q[0, :, 0, 0] = _onehot(np.array([[1]]))[:, 0, 0]
    assert parsing_accuracy(q, p) == pytest.approx(5 / 6)
    export_parsing(p[0], tmp_path / "p.png")
    img = Image.open(tmp_path / "p.png")
    assert img.mode == "P"
    assert np.asarray(img).tolist() == labels.tolist()


def test_training_batch_uses_ground_truth_substitutes():
    x = _inputs()
    labels = torch.zeros(2, 64, 64, dtype=torch.long)
    labels[:, 8:20, 8:20] = CLOTHING
    labels[:, 20:24, 4:8] = LEFT_ARM
    x["parsing"] = F.one_hot(labels, 7).permute(0, 3, 1, 2).float()
    x["gt_warp_mask"] = x["parsing"][:, CLOTHING : CLOTHING + 1]
    x["gt_warp_cloth"] = torch.rand(2, 3, 64, 64)
    b = ParsingEstimator().training_batch(x)
    assert b["warped_mask"] is x["gt_warp_mask"] and b["warped_cloth"] is x["gt_warp_cloth"]
    assert torch.equal(b["nonlimb_parsing"][:, CLOTHING], x["gt_warp_mask"][:, 0])
    assert b["nonlimb_parsing"][:, LEFT_ARM].sum() == 0
