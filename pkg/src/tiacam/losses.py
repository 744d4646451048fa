"""Training objectives: pair-discriminator losses, invariance, perceptual fidelity, MSE/SSIM."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import NonFiniteError, ShapeError

PROB_CLAMP = 1e-7


def _clamped_log(p: Tensor) -> Tensor:
    p = as_tensor(p)
    if not np.all(np.isfinite(p.data)):
        raise NonFiniteError("probability input contains NaN or inf")
    return ops.log(ops.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def _clamped_log1m(p: Tensor) -> Tensor:
    p = as_tensor(p)
    if not np.all(np.isfinite(p.data)):
        raise NonFiniteError("probability input contains NaN or inf")
    return ops.log(ops.sub(1.0, ops.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)))


def loss_disc(p_pos, p_pos_dist, p_neg, p_neg_dist) -> Tensor:
    """Negated pair log-likelihood, averaged over the batch; the discriminator minimises it.

    Matched pairs (clean and distorted image with the positive anchor) should
    score high, mismatched pairs (with a negative anchor) low.
    """
    terms = ops.add(
        ops.add(_clamped_log(p_pos), _clamped_log(p_pos_dist)),
        ops.add(_clamped_log1m(p_neg), _clamped_log1m(p_neg_dist)),
    )
    return ops.neg(ops.mean(terms))


def loss_adv(p_pos, p_pos_dist) -> Tensor:
    """``log(1 - p) + log(1 - p')`` on matched pairs, averaged; the extractor minimises it."""
    return ops.mean(ops.add(_clamped_log1m(p_pos), _clamped_log1m(p_pos_dist)))


def loss_inv(f_dist, f) -> Tensor:
    """Mean cosine dissimilarity ``1 - cos(F', F)`` over a batch (or one pair)."""
    return ops.mean(ops.sub(1.0, ops.cosine(as_tensor(f_dist), as_tensor(f))))


# ---------------------------------------------------------------------------
# perceptual probe


def avg_pool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {x.shape}")
    return ops.mean(ops.reshape(x, (n, h // 2, 2, w // 2, 2, c)), axis=(2, 4))


class ProbePyramid:
    """Frozen multi-scale random feature map standing in for a pretrained encoder.

    Stage ``i`` average-pools the image ``i`` times, applies fixed random 3x3
    filters and tanh. Half the filters are zero-mean (texture/edge detectors,
    blind to uniform brightness), half are not.
    """

    def __init__(self, channels: int = 8, stages: int = 3, seed: int = 0, in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.stages = stages
        self.kernels = []
        for _ in range(stages):
            k = rng.standard_normal((3, 3, in_channels, channels))
            half = channels // 2
            k[..., :half] -= k[..., :half].mean(axis=(0, 1, 2), keepdims=True)
            k /= np.sqrt(9 * in_channels)
            self.kernels.append(k * 3.0)

    def __call__(self, x) -> list[Tensor]:
        x = as_tensor(x)
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        feats = []
        level = ops.sub(x, 0.5)
        for i, k in enumerate(self.kernels):
            if i:
                level = avg_pool2(level)
            f = ops.tanh(ops.conv2d(level, k, padding="same"))
            feats.append(ops.reshape(f, (f.shape[0], -1)))
        return feats


def _soft_cosine(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    na = ops.sum(ops.mul(a, a), axis=-1)
    nb = ops.sum(ops.mul(b, b), axis=-1)
    return ops.div(ops.dot_last(a, b), ops.add(ops.sqrt(ops.add(ops.mul(na, nb), eps * eps)), eps))


def loss_sem(x, x_hat, probe: ProbePyramid) -> Tensor:
    """Sum over probe stages of the batch-mean cosine dissimilarity."""
    total = None
    for fa, fb in zip(probe(x), probe(x_hat)):
        term = ops.mean(ops.sub(1.0, _soft_cosine(fa, fb)))
        total = term if total is None else ops.add(total, term)
    return total


# ---------------------------------------------------------------------------
# pixel losses


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mse")
    d = ops.sub(a, b)
    return ops.mean(ops.mul(d, d))


def _window_mean(x: Tensor, window: int) -> Tensor:
    # channels folded into the batch so one single-channel box filter serves all
    n, h, w, c = x.shape
    planes = ops.reshape(ops.transpose(x, (0, 3, 1, 2)), (n * c, h, w, 1))
    box = np.full((window, window, 1, 1), 1.0 / window**2)
    return ops.conv2d(planes, box, padding="valid")


def ssim(a, b, window: int = 8, c1: float = 0.01**2, c2: float = 0.03**2) -> Tensor:
    """Mean SSIM over all ``window x window`` patches (uniform weights) and channels."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "ssim")
    if a.ndim == 3:
        a, b = ops.reshape(a, (1,) + a.shape), ops.reshape(b, (1,) + b.shape)
    if a.shape[1] < window or a.shape[2] < window:
        raise ShapeError(f"ssim: image {a.shape[1:3]} smaller than window {window}")
    mu_a, mu_b = _window_mean(a, window), _window_mean(b, window)
    s_aa = ops.sub(_window_mean(ops.mul(a, a), window), ops.mul(mu_a, mu_a))
    s_bb = ops.sub(_window_mean(ops.mul(b, b), window), ops.mul(mu_b, mu_b))
    s_ab = ops.sub(_window_mean(ops.mul(a, b), window), ops.mul(mu_a, mu_b))
    num = ops.mul(ops.add(ops.mul(ops.mul(mu_a, mu_b), 2.0), c1), ops.add(ops.mul(s_ab, 2.0), c2))
    den = ops.mul(
        ops.add(ops.add(ops.mul(mu_a, mu_a), ops.mul(mu_b, mu_b)), c1),
        ops.add(ops.add(s_aa, s_bb), c2),
    )
    return ops.mean(ops.div(num, den))
