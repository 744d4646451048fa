"""Probe points for finite-difference checks through the quantiser.

Smooth quantisation jumps at integer inputs, so a central difference that
straddles a step measures the jump, not the derivative. These helpers redraw
from the seed's stream until every quantiser input sits a safe margin away
from the nearest integer.
"""

import numpy as np

from tiacam import augment as aug
from tiacam.augment import AugmentorParams, compose_augment
from tiacam.autodiff import Tensor, ops

MARGIN = 1e-3
QUANT_SCALE = 2.0


def _step_distance(y, mask, q_scale):
    h, w = y.shape[1:3]
    z = mask[..., None] * ops.dct2d_np(y * 255.0) / aug.quant_table(q_scale, h, w)[..., None]
    return np.abs(z - np.round(z)).min()


def composed_point(seed, size=8):
    r = np.random.default_rng(seed)
    while True:
        x = r.uniform(0.2, 0.8, (1, size, size, 3))
        p = AugmentorParams.default((size, size))
        p.A.data = np.eye(3) + r.uniform(-0.05, 0.05, (3, 3))
        p.photo_alpha.data = r.uniform(0.8, 1.2, 3)
        p.photo_beta.data = r.uniform(-0.05, 0.05, 3)
        p.photo_gamma.data = r.uniform(0.8, 1.3, 3)
        p.noise_sigma.data = np.array(0.03)
        p.sp_rate.data = np.array(0.02)
        p.kernel.data = r.normal(size=(3, 3))
        p.mask.data = r.uniform(0.3, 1.0, (size, size))
        p.quant_sharpness.data = np.array(r.uniform(2.0, 6.0))
        p.moire_amp.data = np.array(0.03)
        p.moire_fx.data = np.array(r.uniform(2.0, 8.0))
        p.moire_fy.data = np.array(r.uniform(2.0, 8.0))
        p.quant_scale = QUANT_SCALE
        rng_seed = int(r.integers(2**31))
        before = compose_augment(
            Tensor(x), p, np.random.default_rng(rng_seed), enabled=aug.COMPOSITION_ORDER[:-1]
        ).data
        if _step_distance(before, p.mask.data, QUANT_SCALE) > MARGIN:
            return x, p, rng_seed


def compression_far_from_steps(seed, size=8):
    r = np.random.default_rng(1000 + seed)
    while True:
        x = r.uniform(0.0, 1.0, (1, size, size, 3))
        mask = r.uniform(0.3, 1.0, (size, size))
        if _step_distance(x, mask, QUANT_SCALE) > MARGIN:
            return [x, mask, np.array(r.uniform(2.0, 6.0))]
