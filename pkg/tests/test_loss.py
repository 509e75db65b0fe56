import math

import numpy as np
import pytest
import torch

from searaft import tensorops as ops
from searaft.fields import MoLParams
from searaft.loss import (
    LossConfig,
    LossKind,
    clamp_beta,
    l1_loss,
    mog_nll,
    mol_nll,
    naive_laplace_nll,
    naive_mol_nll,
    prediction_loss,
    sequence_loss,
)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def field(rng, b=1, h=3, w=4, scale=2.0):
    return t(rng.normal(scale=scale, size=(b, 2, h, w)))


# --- direct-density oracles (plain exp / log, no log-space rearrangement) ----


def mol_direct(pred, alpha, beta2, gt, valid):
    total, count = 0.0, 0
    b, _, h, w = pred.shape
    for n in range(b):
        for i in range(h):
            for j in range(w):
                if not valid[n, i, j]:
                    continue
                a, s = alpha[n, 0, i, j], math.exp(beta2[n, 0, i, j])
                for d in range(2):
                    e = abs(gt[n, d, i, j] - pred[n, d, i, j])
                    dens = a * math.exp(-e) / 2 + (1 - a) * math.exp(-e / s) / (2 * s)
                    total -= math.log(dens)
                    count += 1
    return total / count


def mog_direct(pred, alpha, beta2, gt, valid):
    total, count = 0.0, 0
    b, _, h, w = pred.shape
    for n in range(b):
        for i in range(h):
            for j in range(w):
                if not valid[n, i, j]:
                    continue
                a, s = alpha[n, 0, i, j], math.exp(beta2[n, 0, i, j])
                for d in range(2):
                    e = gt[n, d, i, j] - pred[n, d, i, j]
                    g1 = math.exp(-e * e / 2) / math.sqrt(2 * math.pi)
                    g2 = math.exp(-e * e / (2 * s * s)) / (s * math.sqrt(2 * math.pi))
                    total -= math.log(a * g1 + (1 - a) * g2)
                    count += 1
    return total / count


def random_instance(seed, h=3, w=4, beta_hi=10.0):
    rng = np.random.default_rng(seed)
    pred, gt = field(rng, h=h, w=w), field(rng, h=h, w=w)
    alpha = t(rng.uniform(0.05, 0.95, size=(1, 1, h, w)))
    beta2 = t(rng.uniform(0.0, min(beta_hi, 3.0), size=(1, 1, h, w)))
    valid = t(rng.uniform(size=(1, h, w)) > 0.25)
    valid[0, 0, 0] = 1.0
    return pred, alpha, beta2, gt, valid


# --- MoL ----------------------------------------------------------------------


def test_mol_exact_match_is_log2():
    z = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    loss = mol_nll(z, torch.ones(1, 1, 2, 2, dtype=torch.float64), torch.zeros(1, 1, 2, 2, dtype=torch.float64), z)
    assert abs(loss.item() - math.log(2)) <= 1e-9


def test_mol_alpha_zero_beta_zero_matches_alpha_one():
    rng = np.random.default_rng(0)
    pred, gt = field(rng), field(rng)
    zero = torch.zeros(1, 1, 3, 4, dtype=torch.float64)
    one = torch.ones_like(zero)
    assert mol_nll(pred, zero, zero, gt).item() == pytest.approx(mol_nll(pred, one, zero, gt).item(), abs=1e-12)


def test_mol_single_pixel_direct_density():
    pred = t([[[[0.0]], [[0.0]]]])
    gt = t([[[[1.0]], [[-1.0]]]])
    alpha, beta2 = t([[[[0.5]]]]), t([[[[2.0]]]])
    s = math.exp(2.0)
    dens = 0.5 * math.exp(-1) / 2 + 0.5 * math.exp(-1 / s) / (2 * s)
    assert abs(mol_nll(pred, alpha, beta2, gt).item() - (-math.log(dens))) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_mol_matches_direct_density(seed):
    pred, alpha, beta2, gt, valid = random_instance(seed)
    got = mol_nll(pred, alpha, beta2, gt, valid).item()
    want = mol_direct(pred.numpy(), alpha.numpy(), beta2.numpy(), gt.numpy(), valid.numpy() > 0.5)
    assert abs(got - want) <= 1e-10


def test_mol_l1_alignment_limit():
    rng = np.random.default_rng(1)
    pred, gt = field(rng), field(rng)
    alpha = torch.full((1, 1, 3, 4), 1 - 1e-9, dtype=torch.float64)
    beta2 = t(rng.uniform(0, 10, size=(1, 1, 3, 4)))
    loss = mol_nll(pred, alpha, beta2, gt).item()
    l1_per_direction = (gt - pred).abs().mean().item()
    assert abs(loss - (math.log(2) + l1_per_direction)) <= 1e-6


def test_mol_monotone_in_residual():
    alpha, beta2 = t([[[[0.3]]]]), t([[[[1.5]]]])
    prev = -math.inf
    for e in np.linspace(0, 50, 200):
        gt = t([[[[e]], [[0.0]]]])
        v = mol_nll(torch.zeros_like(gt), alpha, beta2, gt).item()
        assert v >= prev
        prev = v


@pytest.mark.parametrize("alpha", [0.0, 1e-12, 1 - 1e-12, 1.0])
def test_mol_stability_sweep(alpha):
    for beta in np.linspace(0, 10, 11):
        for mag in (0.0, 1e-3, 1.0, 1e2, 1e4):
            pred = torch.zeros(1, 2, 1, 2, dtype=torch.float64, requires_grad=True)
            gt = t([[[[mag, -mag]], [[mag / 2, 0.0]]]])
            a = torch.full((1, 1, 1, 2), alpha, dtype=torch.float64, requires_grad=True)
            b = torch.full((1, 1, 1, 2), beta, dtype=torch.float64, requires_grad=True)
            loss = mol_nll(pred, a, b, gt)
            loss.backward()
            assert math.isfinite(loss.item())
            for g in (pred.grad, a.grad, b.grad):
                assert torch.isfinite(g).all()


def test_mog_stability_sweep():
    for alpha in (0.0, 1e-12, 1 - 1e-12, 1.0):
        for beta in (0.0, 5.0, 10.0):
            gt = t([[[[1e4]], [[-1e4]]]])
            v = mog_nll(torch.zeros_like(gt), t([[[[alpha]]]]), t([[[[beta]]]]), gt)
            assert math.isfinite(v.item())


def test_mol_rejects_bad_inputs():
    z = torch.zeros(1, 2, 2, 2)
    p = torch.ones(1, 1, 2, 2)
    with pytest.raises(ValueError, match="no valid"):
        mol_nll(z, p, p, z, torch.zeros(1, 2, 2))
    bad = z.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        mol_nll(bad, p, p, z)
    with pytest.raises(ValueError):
        mol_nll(z, p, p, torch.zeros(1, 2, 3, 2))


def test_invalid_pixels_do_not_affect_loss():
    rng = np.random.default_rng(2)
    pred, alpha, beta2, gt, valid = random_instance(2)
    gt2 = gt.clone()
    gt2[:, :, valid[0] < 0.5] = 1e30
    assert mol_nll(pred, alpha, beta2, gt, valid).item() == mol_nll(pred, alpha, beta2, gt2, valid).item()


# --- naive Laplace / naive MoL / MoG / L1 ----------------------------------


def test_naive_laplace_unit_density_point():
    z = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
    logb = torch.full((1, 1, 1, 1), -math.log(2), dtype=torch.float64)
    assert abs(naive_laplace_nll(z, logb, z).item()) <= 1e-15


def test_naive_laplace_unit_scale():
    gt = t([[[[1.5]], [[-0.5]]]])
    v = naive_laplace_nll(torch.zeros_like(gt), torch.zeros(1, 1, 1, 1, dtype=torch.float64), gt)
    assert v.item() == pytest.approx(math.log(2) + 1, abs=1e-12)


def test_naive_laplace_normalizer_is_per_pixel():
    gt = t(np.ones((1, 2, 2, 2)))
    v = naive_laplace_nll(torch.zeros_like(gt), torch.zeros(1, 1, 2, 2, dtype=torch.float64), gt)
    assert v.item() == pytest.approx(math.log(2) + 1)


def test_naive_laplace_clamps_scale():
    gt = t([[[[1.0]], [[1.0]]]])
    lo = naive_laplace_nll(torch.zeros_like(gt), t([[[[-50.0]]]]), gt)
    at = naive_laplace_nll(torch.zeros_like(gt), t([[[[-10.0]]]]), gt)
    assert lo.item() == at.item()


def test_naive_mol_equal_scales_reduce_to_single_laplace_per_direction():
    rng = np.random.default_rng(3)
    pred, gt = field(rng), field(rng)
    s = t(rng.uniform(-2, 2, size=(1, 1, 3, 4)))
    a = t(rng.uniform(0.1, 0.9, size=(1, 1, 3, 4)))
    got = naive_mol_nll(pred, a, s, s, gt).item()
    e = (gt - pred).abs()
    want = (math.log(2) + s + e * torch.exp(-s)).mean().item()
    assert got == pytest.approx(want, abs=1e-12)


def test_mog_anchor_values():
    z = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
    one, zero = torch.ones(1, 1, 1, 1, dtype=torch.float64), torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    assert abs(mog_nll(z, one, zero, z).item() - half_log_2pi) <= 1e-12
    assert abs(mog_nll(z, zero, zero, z).item() - half_log_2pi) <= 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_mog_matches_direct_density(seed):
    pred, alpha, beta2, gt, valid = random_instance(seed + 10)
    got = mog_nll(pred, alpha, beta2, gt, valid).item()
    want = mog_direct(pred.numpy(), alpha.numpy(), beta2.numpy(), gt.numpy(), valid.numpy() > 0.5)
    assert abs(got - want) <= 1e-10


def test_l1_examples():
    z = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
    assert l1_loss(z, z).item() == 0.0
    assert l1_loss(z, t([[[[3.0]], [[4.0]]]])).item() == 7.0
    with pytest.raises(ValueError):
        l1_loss(z, z, torch.zeros(1, 1, 1))


def test_l1_matches_direct_sum():
    rng = np.random.default_rng(4)
    pred, gt = field(rng, b=2, h=5, w=6), field(rng, b=2, h=5, w=6)
    valid = rng.uniform(size=(2, 5, 6)) > 0.3
    p, g = pred.numpy(), gt.numpy()
    total, count = 0.0, 0
    for n in range(2):
        for i in range(5):
            for j in range(6):
                if valid[n, i, j]:
                    total += abs(g[n, 0, i, j] - p[n, 0, i, j]) + abs(g[n, 1, i, j] - p[n, 1, i, j])
                    count += 1
    assert abs(l1_loss(pred, gt, t(valid)).item() - total / count) <= 1e-8


def test_l1_subgradient_zero_at_match():
    z = torch.zeros(1, 2, 1, 1, dtype=torch.float64, requires_grad=True)
    l1_loss(z, torch.zeros(1, 2, 1, 1, dtype=torch.float64)).backward()
    assert torch.equal(z.grad, torch.zeros_like(z))


# --- sequence loss --------------------------------------------------------------


def test_sequence_loss_examples():
    assert sequence_loss([1.0, 1.0, 1.0, 1.0], 0.8) == pytest.approx(2.952, abs=1e-12)
    assert sequence_loss([3.5], 0.8) == 3.5
    assert sequence_loss([1.0, 2.0, 3.0], 1.0) == 6.0
    assert sequence_loss([2.0, 0.0], 0.5) == 1.0
    with pytest.raises(ValueError):
        sequence_loss([], 0.8)
    with pytest.raises(ValueError):
        sequence_loss([1.0], 0.0)


# --- gradients ------------------------------------------------------------------


def _away_from_kink(rng, pred, gt):
    e = gt - pred
    sign = torch.where(e >= 0, 1.0, -1.0).to(e.dtype)
    return pred, pred + sign * (e.abs() + 0.1)


def _fd_case(kind, seed):
    rng = np.random.default_rng(seed)
    pred, gt = _away_from_kink(rng, field(rng, h=2, w=3), field(rng, h=2, w=3))
    logit = t(rng.normal(size=(1, 1, 2, 3)))
    beta = t(rng.uniform(0.5, 3.0, size=(1, 1, 2, 3)))
    beta1 = t(rng.uniform(-2, 2, size=(1, 1, 2, 3)))
    if kind == "mol":
        return (lambda p, l, b: mol_nll(p, ops.sigmoid(l), b, gt)), [pred, logit, beta]
    if kind == "mog":
        return (lambda p, l, b: mog_nll(p, ops.sigmoid(l), b, gt)), [pred, logit, beta]
    if kind == "naive_laplace":
        return (lambda p, b: naive_laplace_nll(p, b, gt)), [pred, beta1]
    if kind == "naive_mol":
        return (lambda p, l, b1, b2: naive_mol_nll(p, ops.sigmoid(l), b1, b2, gt)), [pred, logit, beta1, beta]
    return (lambda p: l1_loss(p, gt)), [pred]


@pytest.mark.parametrize("kind", ["mol", "mog", "naive_laplace", "naive_mol", "l1"])
def test_loss_gradients_match_fd(kind):
    worst = max(ops.finite_difference_check(*_fd_case(kind, s), step=1e-6) for s in range(5))
    assert worst <= 1e-5, worst


def test_naive_laplace_logb_gradient_tight():
    gt = t([[[[1.3]], [[-0.4]]]])
    pred = torch.zeros_like(gt)
    err = ops.finite_difference_check(lambda b: naive_laplace_nll(pred, b, gt), [t([[[[0.7]]]])], step=1e-6)
    assert err <= 1e-6


def test_sequence_loss_gradient():
    xs = [torch.tensor(1.0, dtype=torch.float64, requires_grad=True) for _ in range(4)]
    sequence_loss(xs, 0.8).backward()
    assert [x.grad.item() for x in xs] == pytest.approx([0.512, 0.64, 0.8, 1.0])


# --- bounded-beta contract --------------------------------------------------------


def test_clamp_beta_projected_gradient():
    x = torch.tensor([0.0, 0.0, 10.0, 10.0, 5.0, -3.0], dtype=torch.float64, requires_grad=True)
    g = torch.tensor([1.0, -1.0, -1.0, 1.0, 2.0, 1.0], dtype=torch.float64)
    y = clamp_beta(x, 0.0, 10.0)
    assert y.tolist() == [0.0, 0.0, 10.0, 10.0, 5.0, 0.0]
    (y * g).sum().backward()
    # descent direction is -g: leaves [0, 10] at entries 0 and 2
    assert x.grad.tolist() == [0.0, -1.0, 0.0, 1.0, 2.0, 0.0]


@pytest.mark.parametrize("beta", [0.0, 10.0])
def test_mol_beta_gradient_zero_at_bound_when_update_exits(beta):
    # at beta2 = 0 a tiny residual wants a smaller scale; at 10 a huge one wants a larger scale
    mag = 1e-3 if beta == 0.0 else 1e6
    gt = t([[[[mag]], [[mag]]]])
    b = torch.full((1, 1, 1, 1), beta, dtype=torch.float64, requires_grad=True)
    mol_nll(torch.zeros_like(gt), t([[[[0.5]]]]), b, gt).backward()
    assert b.grad.item() == 0.0


def test_mol_beta_gradient_kept_at_bound_when_update_enters():
    gt = t([[[[50.0]], [[50.0]]]])
    b = torch.zeros(1, 1, 1, 1, dtype=torch.float64, requires_grad=True)
    mol_nll(torch.zeros_like(gt), t([[[[0.5]]]]), b, gt).backward()
    assert b.grad.item() < 0


def test_prediction_loss_dispatch():
    rng = np.random.default_rng(5)
    pred, alpha, beta2, gt, _ = random_instance(5)
    mol = MoLParams(alpha=alpha, beta2=beta2, beta1=beta2 - 1)
    assert prediction_loss(LossConfig(), pred, mol, gt).item() == mol_nll(pred, alpha, beta2, gt).item()
    assert prediction_loss(LossConfig(LossKind.L1), pred, mol, gt).item() == l1_loss(pred, gt).item()
    v = prediction_loss(LossConfig("naive_laplace"), pred, mol, gt).item()
    assert v == naive_laplace_nll(pred, beta2, gt).item()
    assert math.isfinite(prediction_loss(LossConfig("naive_mol"), pred, mol, gt).item())
    with pytest.raises(ValueError):
        prediction_loss(LossConfig("naive_mol"), pred, MoLParams(alpha, beta2), gt)


def test_loss_config_validation():
    assert LossConfig().gamma == 0.8 and LossConfig().beta_upper == 10.0
    assert LossConfig("naive_laplace").beta_range == (-10.0, 10.0)
    assert LossConfig().beta_range == (0.0, 10.0)
    with pytest.raises(ValueError):
        LossConfig(gamma=1.5)
    with pytest.raises(ValueError):
        LossConfig(kind="huber")
