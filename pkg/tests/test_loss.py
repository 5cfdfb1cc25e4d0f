import math

import numpy as np
import pytest
import torch

from adakd.loss import DistillObjective, DivergenceKind, selective_distill_loss, sft_loss

FKL = DistillObjective(DivergenceKind.FORWARD_KL)
RKL = DistillObjective(DivergenceKind.REVERSE_KL)


def _probs(z, tau):
    e = [math.exp(v / tau) for v in z]
    s = sum(e)
    return [x / s for x in e]


def test_full_mask_unit_temperature_is_forward_kd_baseline():
    torch.manual_seed(0)
    zt = torch.randn(2, 5, 7, dtype=torch.float64)
    zs = torch.randn(2, 5, 7, dtype=torch.float64)
    lp = torch.log_softmax(zt.reshape(-1, 7), -1)
    lq = torch.log_softmax(zs.reshape(-1, 7), -1)
    baseline = (lp.exp() * (lp - lq)).sum(-1).sum() / 10
    loss = selective_distill_loss(zt, zs, np.ones((2, 5), bool), np.ones(10), FKL)
    assert loss.item() == baseline.item()


def test_identical_logits_zero_loss_and_gradient():
    z = torch.randn(1, 4, 6, dtype=torch.float64)
    zs = z.clone().requires_grad_(True)
    loss = selective_distill_loss(z, zs, None, [0.7, 1.0, 1.3, 2.0], RKL)
    loss.backward()
    assert loss.item() == 0.0
    assert torch.count_nonzero(zs.grad.abs() > 1e-15) == 0


def test_two_token_reverse_kl_with_tau_squared():
    zt = [[2.0, 0.0, -1.0], [0.5, 0.1, 1.5]]
    zs = [[0.0, 1.0, 0.0], [1.0, -0.5, 0.2]]
    taus = [0.5, 2.0]
    expected = 0.0
    for a, b, tau in zip(zt, zs, taus):
        p, q = _probs(a, tau), _probs(b, tau)
        expected += tau**2 * sum(qi * math.log(qi / pi) for pi, qi in zip(p, q))
    expected /= 2
    loss = selective_distill_loss(np.array([zt]), np.array([zs]), None, taus, RKL)
    assert loss.item() == pytest.approx(expected, abs=1e-10)


def test_only_selected_positions_get_gradient():
    zt = torch.randn(2, 4, 5, dtype=torch.float64)
    zs = torch.randn(2, 4, 5, dtype=torch.float64, requires_grad=True)
    mask = np.array([[True, False, True, False], [False, False, True, True]])
    selective_distill_loss(zt, zs, mask, [0.8, 1.1, 1.4, 0.6], RKL).backward()
    assert torch.all(zs.grad[torch.as_tensor(~mask)] == 0)
    assert torch.all(zs.grad[torch.as_tensor(mask)].abs().sum(-1) > 0)


def test_forward_kl_logit_gradient_is_scaled_difference():
    # unscaled KL(p || q) at temperature tau: d/dz_q = (q_tau - p_tau) / tau
    zt = torch.tensor([[[1.0, -0.5, 0.3, 2.0]]], dtype=torch.float64)
    zs = torch.tensor([[[0.2, 0.4, -1.0, 0.5]]], dtype=torch.float64, requires_grad=True)
    tau = 0.7
    selective_distill_loss(zt, zs, None, [tau], DistillObjective(DivergenceKind.FORWARD_KL, apply_tau_sq=False)).backward()
    p = torch.softmax(zt[0, 0] / tau, -1)
    q = torch.softmax(zs[0, 0].detach() / tau, -1)
    torch.testing.assert_close(zs.grad[0, 0], (q - p) / tau, rtol=0, atol=1e-14)


def test_reverse_kl_logit_gradient():
    # d KL(q || p)/dz_q = q * (log q - log p - KL) / tau
    zt = torch.tensor([[[1.0, -0.5, 0.3, 2.0]]], dtype=torch.float64)
    zs = torch.tensor([[[0.2, 0.4, -1.0, 0.5]]], dtype=torch.float64, requires_grad=True)
    tau = 1.6
    selective_distill_loss(zt, zs, None, [tau], DistillObjective(apply_tau_sq=False)).backward()
    lp = torch.log_softmax(zt[0, 0] / tau, -1)
    lq = torch.log_softmax(zs[0, 0].detach() / tau, -1)
    kl = (lq.exp() * (lq - lp)).sum()
    torch.testing.assert_close(zs.grad[0, 0], lq.exp() * (lq - lp - kl) / tau, rtol=0, atol=1e-14)


def test_js_objective_is_symmetric():
    zt = torch.randn(1, 3, 5, dtype=torch.float64)
    zs = torch.randn(1, 3, 5, dtype=torch.float64)
    js = DistillObjective(DivergenceKind.JS)
    a = selective_distill_loss(zt, zs, None, None, js)
    b = selective_distill_loss(zs, zt, None, None, js)
    assert a.item() == pytest.approx(b.item(), abs=1e-15)


def test_rejects_empty_and_misaligned():
    z = torch.zeros(1, 3, 4, dtype=torch.float64)
    with pytest.raises(ValueError, match="empty"):
        selective_distill_loss(z, z, np.zeros((1, 3), bool))
    with pytest.raises(ValueError, match="temperatures"):
        selective_distill_loss(z, z, None, [1.0, 1.0])
    with pytest.raises(ValueError, match="misaligned"):
        selective_distill_loss(z, torch.zeros(1, 2, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        DistillObjective(sft_weight=1.5).validate()


class TestSft:
    def test_uniform(self):
        assert sft_loss(torch.zeros(1, 3, 4, dtype=torch.float64), [[0, 1, 2]]).item() == pytest.approx(math.log(4))

    def test_confident_correct(self):
        z = torch.zeros(1, 2, 4, dtype=torch.float64)
        z[0, 0, 1] = z[0, 1, 3] = 50.0
        assert sft_loss(z, [[1, 3]]).item() < 1e-20

    def test_hand_case(self):
        z = [[1.0, 0.0, -1.0], [0.2, 0.2, 0.9], [3.0, 1.0, 2.0]]
        tgt = [2, 0, 1]
        expected = 0.0
        for row, t in zip(z, tgt):
            expected -= math.log(_probs(row, 1.0)[t])
        expected /= 3
        assert sft_loss(np.array([z]), [tgt]).item() == pytest.approx(expected, abs=1e-10)

    def test_mask_and_misalignment(self):
        z = torch.zeros(1, 3, 4, dtype=torch.float64)
        z[0, 2] = torch.tensor([9.0, -9.0, 0.0, 0.0])
        assert sft_loss(z, [[0, 1, 2]], [[True, True, False]]).item() == pytest.approx(math.log(4))
        with pytest.raises(ValueError):
            sft_loss(z, [[0, 1]])
