import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiacam.autodiff import Tensor, backward, finite_diff_check, ops
from tiacam.data import synthetic_dataset
from tiacam.errors import NonFiniteError, ShapeError
from tiacam.losses import ProbePyramid, loss_adv, loss_disc, loss_inv, loss_sem, mse, ssim
from tiacam.optim import Adam


def _leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- pair losses


def test_loss_disc_at_half():
    h = np.array([0.5])
    assert loss_disc(h, h, h, h).item() == pytest.approx(4 * math.log(2), abs=1e-12)


def test_loss_disc_optimum_and_clamp():
    one, zero = np.array([1.0]), np.array([0.0])
    v = loss_disc(one, one, zero, zero).item()
    assert 0 < v < 1e-6


def test_loss_disc_gradient_per_term():
    p = _leaf([0.5])
    h = np.array([0.5])
    backward(loss_disc(p, h, h, h))
    assert p.grad[0] == pytest.approx(-2.0, abs=1e-12)


def test_loss_adv_values_and_sign():
    h = np.array([0.5])
    assert loss_adv(h, h).item() == pytest.approx(2 * math.log(0.5), abs=1e-12)
    near_one = np.array([1.0])
    assert loss_adv(near_one, near_one).item() == pytest.approx(2 * math.log(1e-7), rel=1e-6)
    p = _leaf([0.3, 0.7])
    backward(loss_adv(p, np.array([0.5, 0.5])))
    assert np.all(p.grad < 0)
    assert np.allclose(p.grad, -1 / (1 - p.data) / 2)


def test_nan_probability_rejected():
    with pytest.raises(NonFiniteError):
        loss_adv(np.array([np.nan]), np.array([0.5]))


def test_discriminator_step_on_loss_disc_raises_real_probability():
    # minimising the stored loss is ascent on the pair log-likelihood
    logit = _leaf([0.0])
    opt = Adam([logit], lr=0.1)
    p = ops.sigmoid(logit)
    grads = backward(loss_disc(p, p, np.array([0.5]), np.array([0.5])))
    opt.step([grads[logit.id]])
    assert logit.data[0] > 0


def test_loss_inv_cases():
    f = np.random.default_rng(0).normal(size=16)
    assert loss_inv(f, f).item() == pytest.approx(0.0, abs=1e-15)
    assert loss_inv(-f, f).item() == 2.0
    e = np.eye(4)
    assert loss_inv(e[0], e[1]).item() == 1.0
    with pytest.raises(ValueError, match="undefined cosine"):
        loss_inv(np.zeros(4), e[0])


@pytest.mark.parametrize("seed", range(10))
def test_pair_loss_gradients(seed):
    r = np.random.default_rng(seed)
    probs = [r.uniform(0.05, 0.95, 5) for _ in range(4)]
    assert finite_diff_check(lambda *p: loss_disc(*p), probs, eps=1e-7, tol=1e-4).passed
    assert finite_diff_check(lambda a, b: loss_adv(a, b), probs[:2], eps=1e-7, tol=1e-4).passed
    f = [r.normal(size=(3, 16)), r.normal(size=(3, 16))]
    assert finite_diff_check(lambda a, b: loss_inv(a, b), f, eps=1e-6, tol=1e-4).passed


# ---------------------------------------------------------------- semantic probe


def test_loss_sem_zero_on_identity_and_nonnegative():
    probe = ProbePyramid()
    x = np.random.default_rng(1).random((2, 16, 16, 3))
    assert loss_sem(x, x, probe).item() == pytest.approx(0.0, abs=1e-12)
    y = np.random.default_rng(2).random((2, 16, 16, 3))
    assert loss_sem(x, y, probe).item() >= 0


def test_loss_sem_brightness_below_shuffle():
    probe = ProbePyramid()
    x = synthetic_dataset(4, 32, seed=0).images
    bright = np.clip(x + 0.1, 0, 1)
    rng = np.random.default_rng(3)
    shuffled = x.copy()
    for img in shuffled:
        flat = img.reshape(-1, 3)
        idx = rng.choice(len(flat), len(flat) // 2, replace=False)
        flat[idx] = flat[rng.permutation(idx)]
    assert loss_sem(x, bright, probe).item() < loss_sem(x, shuffled, probe).item()


@pytest.mark.parametrize("seed", range(10))
def test_loss_sem_gradient(seed):
    probe = ProbePyramid(channels=4, seed=seed)
    r = np.random.default_rng(seed)
    x = r.random((1, 8, 8, 3))
    y = x + r.normal(scale=0.1, size=x.shape)
    report = finite_diff_check(lambda b: loss_sem(Tensor(x), b, probe), y, eps=1e-6, tol=1e-4)
    assert report.passed, report.max_rel_err


# ---------------------------------------------------------------- MSE / SSIM


def _ssim_oracle(a, b, window=8, c1=0.01**2, c2=0.03**2):
    vals = []
    for ch in range(a.shape[-1]):
        for i in range(a.shape[0] - window + 1):
            for j in range(a.shape[1] - window + 1):
                pa = a[i : i + window, j : j + window, ch].ravel()
                pb = b[i : i + window, j : j + window, ch].ravel()
                ma, mb = pa.mean(), pb.mean()
                va, vb = pa.var(), pb.var()
                cov = ((pa - ma) * (pb - mb)).mean()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_mse_and_ssim_trivial_cases():
    x = np.random.default_rng(0).random((12, 12, 3))
    assert mse(x, x).item() == 0.0
    assert ssim(x, x).item() == 1.0
    assert mse(np.zeros((4, 4, 3)), np.ones((4, 4, 3))).item() == 1.0


def test_ssim_matches_brute_force():
    r = np.random.default_rng(1)
    a = r.random((12, 10, 3))
    b = np.clip(a + r.normal(scale=0.1, size=a.shape), 0, 1)
    assert ssim(a, b).item() == pytest.approx(_ssim_oracle(a, b), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((10, 10, 3)), r.random((10, 10, 3))
    s_ab, s_ba = ssim(a, b).item(), ssim(b, a).item()
    assert abs(s_ab - s_ba) <= 1e-9
    assert -1 <= s_ab <= 1


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_pixel_loss_gradients(seed):
    r = np.random.default_rng(seed)
    a = r.random((1, 8, 8, 3))
    b = r.random((1, 8, 8, 3))
    assert finite_diff_check(lambda x: mse(x, Tensor(a)), b, eps=1e-6, tol=1e-4).passed
    assert finite_diff_check(lambda x: ssim(x, Tensor(a), window=4), b, eps=1e-6, tol=1e-4).passed


# ---------------------------------------------------------------- Adam


def test_adam_matches_scalar_reference():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    w = _leaf(np.array([3.0]))
    opt = Adam([w], lr=lr, betas=(b1, b2), eps=eps)
    ref, m, v = 3.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2.0 * (w.data[0] - 1.0)
        opt.step([np.array([g])])
        gr = 2.0 * (ref - 1.0)
        m = b1 * m + (1 - b1) * gr
        v = b2 * v + (1 - b2) * gr * gr
        ref = ref - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(w.data[0] - ref) <= 1e-12


def test_adam_zero_lr_keeps_parameters():
    w = _leaf(np.array([1.0, 2.0]))
    opt = Adam([w], lr=0.0)
    opt.step([np.array([1.0, -1.0])])
    assert np.array_equal(w.data, [1.0, 2.0]) and opt.t == 1


def test_adam_rejects_non_finite_gradient():
    opt = Adam([_leaf([1.0])])
    with pytest.raises(NonFiniteError, match="augmentor"):
        opt.step([np.array([np.nan])], where="augmentor")
