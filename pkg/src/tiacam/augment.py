"""Learnable camera-distortion operators and their fixed-order composition.

All operators take channels-last images ``(N, H, W, C)`` (a single ``(H, W, C)``
image is accepted and returned unbatched) and are differentiable with respect
to the image and to every learnable parameter. Randomness always comes from an
explicitly passed ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import ConfigError, ShapeError

# Standard JPEG luminance quantisation table (ITU-T T.81, Annex K).
JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

COMPOSITION_ORDER = ("moire", "geometric", "photometric", "additive", "filter", "compression")
# Quantiser sharpness at which the smooth rounding residual stays within half a step.
PASS_THROUGH_SHARPNESS = 20.0
FLOOR_SNAP = 1e-9
PROFILES = ("additive", "photometric", "perspective", "jpeg", "moire", "filtering", "all")


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected an (H, W, C) or (N, H, W, C) image, got {x.shape}")
    return x, False


def _unbatch(y: Tensor, single: bool) -> Tensor:
    return ops.reshape(y, y.shape[1:]) if single else y


# ---------------------------------------------------------------------------
# geometric


def normalized_to_pixel(A: Tensor, height: int, width: int) -> Tensor:
    """Conjugate a homography acting on [-1, 1] coordinates into pixel coordinates."""
    s = np.array([[2.0 / (width - 1), 0.0, -1.0], [0.0, 2.0 / (height - 1), -1.0], [0.0, 0.0, 1.0]])
    return ops.matmul(ops.matmul(np.linalg.inv(s), as_tensor(A)), s)


def homography_grid(A: Tensor, height: int, width: int) -> Tensor:
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    coords = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
    p = ops.matmul(coords, ops.transpose(A))
    xy = ops.div(p[:, :2], p[:, 2:3])
    return ops.reshape(xy, (height, width, 2))


def apply_geometric(x, A) -> Tensor:
    """Resample ``x`` at ``A @ [u, v, 1]`` (pixel coordinates, u = column)."""
    A = as_tensor(A)
    if A.shape != (3, 3):
        raise ShapeError(f"apply_geometric: homography must be 3x3, got {A.shape}")
    if abs(np.linalg.det(A.data)) <= 1e-8:
        raise ValueError("degenerate homography")
    xb, single = _batched(x)
    grid = homography_grid(A, xb.shape[1], xb.shape[2])
    if np.any(np.abs(grid.data) > 1e6):
        raise ValueError("degenerate homography: points mapped near infinity")
    return _unbatch(ops.bilinear_grid_sample(xb, grid), single)


# ---------------------------------------------------------------------------
# photometric / noise


def apply_photometric(x, alpha, gamma, beta) -> Tensor:
    """``alpha * max(x, 0) ** gamma + beta`` per channel; no output clamp."""
    gamma = as_tensor(gamma)
    if np.any(gamma.data <= 0):
        raise ValueError("apply_photometric: gamma must be positive")
    x = as_tensor(x)
    base = ops.clip(x, 0.0, None)
    return ops.add(ops.mul(alpha, ops.pow(base, gamma)), beta)


def apply_additive(x, sigma, rng: np.random.Generator) -> Tensor:
    """Reparameterised Gaussian noise: ``x + sigma * z``."""
    x = as_tensor(x)
    sigma = as_tensor(sigma)
    if np.any(sigma.data < 0):
        raise ValueError("apply_additive: sigma must be non-negative")
    z = rng.standard_normal(x.shape)
    return ops.add(x, ops.mul(sigma, z))


def gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def salt_pepper_weights(rate, temperature: float, noise: np.ndarray) -> Tensor:
    """Relaxed one-hot weights over (keep, salt, pepper) from fixed Gumbel draws."""
    if temperature <= 0:
        raise ValueError("salt-and-pepper temperature must be positive")
    rate = as_tensor(rate)
    half = ops.mul(rate, 0.5)
    logits = ops.log(ops.add(ops.stack([ops.sub(1.0, rate), half, half]), 1e-12))
    return ops.softmax(ops.div(ops.add(logits, noise), temperature), axis=-1)


def apply_salt_pepper(x, rate, temperature: float, rng: np.random.Generator) -> Tensor:
    """Gumbel-softmax relaxed salt-and-pepper noise, one draw per pixel."""
    if temperature <= 0:
        raise ValueError("apply_salt_pepper: temperature must be positive")
    rate = as_tensor(rate)
    if np.any(rate.data < 0) or np.any(rate.data > 1):
        raise ValueError("apply_salt_pepper: rate must lie in [0, 1]")
    xb, single = _batched(x)
    noise = gumbel(rng, xb.shape[:3] + (3,))
    w = salt_pepper_weights(rate, temperature, noise)
    keep, salt = w[..., 0:1], w[..., 1:2]
    return _unbatch(ops.add(ops.mul(keep, xb), salt), single)


# ---------------------------------------------------------------------------
# filtering


def normalize_kernel(K, from_logits: bool = False) -> Tensor:
    K = as_tensor(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] % 2 == 0:
        raise ShapeError(f"filter kernel must be square with odd size, got {K.shape}")
    if from_logits:
        K = ops.softplus(K)
    elif np.any(K.data < 0):
        raise ValueError("filter kernel must be non-negative")
    return ops.div(K, ops.sum(K))


def apply_filter(x, K, from_logits: bool = False) -> Tensor:
    """Same-size convolution (zero padding) with the sum-normalised kernel ``K``.

    With ``from_logits`` the kernel is first passed through softplus, which is how
    the augmentor keeps it non-negative while learning unconstrained values.
    """
    kernel = normalize_kernel(K, from_logits)
    xb, single = _batched(x)
    c = xb.shape[-1]
    flipped = kernel[::-1, ::-1]
    w = ops.mul(ops.reshape(flipped, flipped.shape + (1, 1)), np.eye(c))
    return _unbatch(ops.conv2d(xb, w, padding="same"), single)


# ---------------------------------------------------------------------------
# compression


def smooth_quantize(z, alpha_q) -> Tensor:
    """``floor(z) + sigmoid(alpha_q * frac(z)) - 0.5``; floor is a constant for backward."""
    z = as_tensor(z)
    # values a rounding error below an integer belong to that integer's cell
    fl = Tensor(np.floor(z.data + FLOOR_SNAP))
    frac = ops.sub(z, fl)
    return ops.add(fl, ops.sub(ops.sigmoid(ops.mul(alpha_q, frac)), 0.5))


def quant_table(q_scale, height: int, width: int) -> np.ndarray:
    """Full-image step table: a scalar scales the JPEG luma table, an 8x8 array is used as-is."""
    q = np.asarray(q_scale, dtype=np.float64)
    table = JPEG_LUMA * q if q.ndim == 0 else q
    if table.shape != (8, 8):
        raise ShapeError(f"quantisation table must be 8x8, got {table.shape}")
    if np.any(table <= 0):
        raise ValueError("quantisation steps must be positive")
    return np.tile(table, (height // 8, width // 8))


def apply_compression(x, M, alpha_q, q_scale=1.0) -> Tensor:
    """Differentiable JPEG surrogate: masked blockwise DCT, smooth quantisation, inverse DCT."""
    xb, single = _batched(x)
    M = as_tensor(M)
    h, w = xb.shape[1:3]
    if M.shape != (h, w):
        raise ShapeError(f"apply_compression: mask {M.shape} does not match block grid {(h, w)}")
    q = quant_table(q_scale, h, w)[..., None]
    coef = ops.dct2d(ops.mul(xb, 255.0))
    z = ops.div(ops.mul(ops.reshape(M, (h, w, 1)), coef), q)
    rec = ops.idct2d(ops.mul(smooth_quantize(z, alpha_q), q))
    return _unbatch(ops.div(rec, 255.0), single)


# ---------------------------------------------------------------------------
# moire


def moire_pattern(amp, fx, fy, phi: float, height: int, width: int) -> Tensor:
    v, u = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    arg = ops.add(ops.mul(ops.add(ops.mul(fx, u), ops.mul(fy, v)), 2 * math.pi), phi)
    return ops.reshape(ops.mul(amp, ops.sin(arg)), (height, width, 1))


def apply_moire(x, amp, fx, fy, phi: float) -> Tensor:
    """Add ``amp * sin(2*pi*(fx*u + fy*v) + phi)`` with u, v in [0, 1]."""
    amp = as_tensor(amp)
    if np.any(amp.data < 0):
        raise ValueError("apply_moire: amplitude must be non-negative")
    xb, single = _batched(x)
    pattern = moire_pattern(amp, fx, fy, float(phi), xb.shape[1], xb.shape[2])
    return _unbatch(ops.add(xb, pattern), single)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParamBounds:
    geo_max_dev: float = 0.1
    alpha_range: tuple[float, float] = (0.7, 1.3)
    beta_range: tuple[float, float] = (-0.15, 0.15)
    gamma_range: tuple[float, float] = (0.6, 1.6)
    sigma_max: float = 0.1
    sp_max: float = 0.05
    kernel_logit_range: tuple[float, float] = (-30.0, 30.0)
    quant_sharpness_range: tuple[float, float] = (1.0, 20.0)
    moire_amp_max: float = 0.08
    moire_freq_range: tuple[float, float] = (1.0, 12.0)

    def __post_init__(self):
        if self.gamma_range[0] <= 0:
            raise ConfigError("gamma lower bound must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBounds":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown augmentor bound(s): {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


LEARNABLE = (
    "A", "photo_alpha", "photo_beta", "photo_gamma", "noise_sigma", "sp_rate",
    "kernel", "mask", "quant_sharpness", "moire_amp", "moire_fx", "moire_fy",
)


def _param(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


@dataclass
class AugmentorParams:
    """Learnable distortion parameters (leaf tensors) plus fixed settings.

    ``A`` acts on [-1, 1]-normalised coordinates; ``kernel`` holds the
    pre-softplus filter logits; ``mask`` has one entry per DCT coefficient of
    the image (shared by the colour channels).
    """

    A: Tensor
    photo_alpha: Tensor
    photo_beta: Tensor
    photo_gamma: Tensor
    noise_sigma: Tensor
    sp_rate: Tensor
    kernel: Tensor
    mask: Tensor
    quant_sharpness: Tensor
    moire_amp: Tensor
    moire_fx: Tensor
    moire_fy: Tensor
    sp_temp: float = 0.5
    quant_scale: float = 0.5
    moire_phase_range: tuple[float, float] = (0.0, 2 * math.pi)

    @classmethod
    def identity(cls, size: tuple[int, int], kernel_size: int = 3, channels: int = 3) -> "AugmentorParams":
        """Parameters under which the composition is the identity map (noise off)."""
        logits = np.full((kernel_size, kernel_size), -30.0)
        logits[kernel_size // 2, kernel_size // 2] = 30.0
        return cls(
            A=_param(np.eye(3)),
            photo_alpha=_param(np.ones(channels)),
            photo_beta=_param(np.zeros(channels)),
            photo_gamma=_param(np.ones(channels)),
            noise_sigma=_param(0.0),
            sp_rate=_param(0.0),
            kernel=_param(logits),
            mask=_param(np.ones(size)),
            quant_sharpness=_param(PASS_THROUGH_SHARPNESS),
            moire_amp=_param(0.0),
            moire_fx=_param(6.0),
            moire_fy=_param(4.0),
            # quantisation steps this fine keep rounding far below 8-bit resolution
            quant_scale=1e-6,
        )

    @classmethod
    def default(cls, size: tuple[int, int], kernel_size: int = 3, channels: int = 3) -> "AugmentorParams":
        """Mild starting point used before any pretraining."""
        p = cls.identity(size, kernel_size, channels)
        r = np.arange(kernel_size) - kernel_size // 2
        gauss = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / 2.0)
        gauss /= gauss.sum()
        # softplus^-1 of the Gaussian weights (scaled so the logits stay moderate)
        logits = np.log(np.expm1(gauss * 4.0))
        return replace(
            p,
            noise_sigma=_param(0.02),
            sp_rate=_param(0.005),
            kernel=_param(logits),
            quant_sharpness=_param(4.0),
            moire_amp=_param(0.02),
            quant_scale=0.5,
        )

    def learnable(self) -> list[Tensor]:
        return [getattr(self, name) for name in LEARNABLE]

    def named_learnable(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in LEARNABLE}

    def copy(self) -> "AugmentorParams":
        return replace(self, **{n: _param(getattr(self, n).data.copy()) for n in LEARNABLE})

    def detached(self) -> "AugmentorParams":
        """Same values as constants, for forward passes that must not reach Theta."""
        return replace(self, **{n: Tensor(getattr(self, n).data) for n in LEARNABLE})

    def assign(self, other: "AugmentorParams") -> None:
        """Copy values from ``other`` into this object's leaf tensors (kept by identity)."""
        for name in LEARNABLE:
            getattr(self, name).data = getattr(other, name).data.copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: getattr(self, n).data.copy() for n in LEARNABLE}
        state["sp_temp"] = np.array(self.sp_temp)
        state["quant_scale"] = np.array(self.quant_scale)
        state["moire_phase_range"] = np.array(self.moire_phase_range)
        return state

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "AugmentorParams":
        return cls(
            **{n: _param(state[n]) for n in LEARNABLE},
            sp_temp=float(state["sp_temp"]),
            quant_scale=float(state["quant_scale"]),
            moire_phase_range=tuple(float(v) for v in state["moire_phase_range"]),
        )

    def to_json(self) -> dict:
        d = {k: v.tolist() for k, v in self.state_dict().items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AugmentorParams":
        return cls.from_state_dict({k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def clamp_params(params: AugmentorParams, bounds: ParamBounds = ParamBounds()) -> AugmentorParams:
    """Project every learnable field onto its configured interval (idempotent)."""
    dev = bounds.geo_max_dev
    eye = np.eye(3)
    clipped = {
        "A": np.clip(params.A.data, eye - dev, eye + dev),
        "photo_alpha": np.clip(params.photo_alpha.data, *bounds.alpha_range),
        "photo_beta": np.clip(params.photo_beta.data, *bounds.beta_range),
        "photo_gamma": np.clip(params.photo_gamma.data, *bounds.gamma_range),
        "noise_sigma": np.clip(params.noise_sigma.data, 0.0, bounds.sigma_max),
        "sp_rate": np.clip(params.sp_rate.data, 0.0, bounds.sp_max),
        "kernel": np.clip(np.nan_to_num(params.kernel.data), *bounds.kernel_logit_range),
        "mask": np.clip(params.mask.data, 0.0, 1.0),
        "quant_sharpness": np.clip(params.quant_sharpness.data, *bounds.quant_sharpness_range),
        "moire_amp": np.clip(params.moire_amp.data, 0.0, bounds.moire_amp_max),
        "moire_fx": np.clip(params.moire_fx.data, *bounds.moire_freq_range),
        "moire_fy": np.clip(params.moire_fy.data, *bounds.moire_freq_range),
    }
    return replace(params, **{k: _param(v) for k, v in clipped.items()})


def compose_augment(
    x,
    params: AugmentorParams,
    rng: np.random.Generator,
    order: Sequence[str] = COMPOSITION_ORDER,
    enabled: Optional[Iterable[str]] = None,
    salt_pepper: bool = True,
) -> Tensor:
    """Apply the enabled modules in ``order`` (first entry is applied first).

    The default order applies Moire, then geometry, photometric, additive
    noise, filtering and finally compression.
    """
    unknown = set(order) - set(COMPOSITION_ORDER)
    if unknown:
        raise ConfigError(f"unknown augmentor module(s): {sorted(unknown)}")
    active = set(COMPOSITION_ORDER if enabled is None else enabled)
    xb, single = _batched(x)
    h, w = xb.shape[1:3]
    y = xb
    for name in order:
        if name not in active:
            continue
        if name == "moire":
            phi = rng.uniform(*params.moire_phase_range)
            y = apply_moire(y, params.moire_amp, params.moire_fx, params.moire_fy, phi)
        elif name == "geometric":
            y = apply_geometric(y, normalized_to_pixel(params.A, h, w))
        elif name == "photometric":
            y = apply_photometric(y, params.photo_alpha, params.photo_gamma, params.photo_beta)
        elif name == "additive":
            y = apply_additive(y, params.noise_sigma, rng)
            if salt_pepper:
                y = apply_salt_pepper(y, params.sp_rate, params.sp_temp, rng)
        elif name == "filter":
            y = apply_filter(y, params.kernel, from_logits=True)
        elif name == "compression":
            y = apply_compression(y, params.mask, params.quant_sharpness, params.quant_scale)
    return _unbatch(y, single)


def render(x) -> np.ndarray:
    """Hard-clamp to [0, 1] and quantise to 8-bit for writing to disk."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# hand-crafted distortions (ablation baseline and held-out evaluation)


def jpeg_quality_table(quality: float) -> np.ndarray:
    """IJG quality scaling of the luma table."""
    quality = float(np.clip(quality, 1, 100))
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((JPEG_LUMA * scale + 50.0) / 100.0), 1.0)


def jpeg_hard(x: np.ndarray, quality: float) -> np.ndarray:
    """Non-differentiable JPEG-like round trip (level shift, DCT, rounding) on every channel."""
    h, w = x.shape[-3:-1]
    table = np.tile(jpeg_quality_table(quality), (h // 8, w // 8))[..., None]
    coef = ops.dct2d_np(x * 255.0 - 128.0)
    rec = ops.idct2d_np(np.round(coef / table) * table)
    return (rec + 128.0) / 255.0


def gaussian_kernel(sigma: float, size: int = 5) -> np.ndarray:
    r = np.arange(size) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * max(sigma, 1e-6) ** 2))
    return k / k.sum()


@dataclass
class ManualSettings:
    """Documented sampling ranges of the hand-crafted distortions at severity 1."""

    bounds: ParamBounds = field(default_factory=ParamBounds)
    alpha_dev: float = 0.3
    beta_dev: float = 0.1
    log_gamma_dev: float = 0.3
    jpeg_min_quality: float = 15.0
    blur_sigma_max: float = 1.5


def _manual_one(img: np.ndarray, name: str, s: float, rng: np.random.Generator, fixed: bool, cfg: ManualSettings) -> np.ndarray:
    b = cfg.bounds
    if s <= 0:
        return img
    c = img.shape[-1]
    h, w = img.shape[:2]
    if name == "additive":
        sigma = s * b.sigma_max
        return img + sigma * rng.standard_normal(img.shape)
    if name == "photometric":
        if fixed:
            alpha = np.full(c, 1.0 + 0.6 * cfg.alpha_dev * s)
            beta = np.full(c, 0.5 * cfg.beta_dev * s)
            gamma = np.full(c, math.exp(0.6 * cfg.log_gamma_dev * s))
        else:
            alpha = 1.0 + s * rng.uniform(-cfg.alpha_dev, cfg.alpha_dev, c)
            beta = s * rng.uniform(-cfg.beta_dev, cfg.beta_dev, c)
            gamma = np.exp(s * rng.uniform(-cfg.log_gamma_dev, cfg.log_gamma_dev, c))
        return alpha * np.maximum(img, 0.0) ** gamma + beta
    if name == "perspective":
        if fixed:
            delta = np.array([[0.5, 0.3, 0.5], [-0.3, 0.5, -0.5], [0.4, 0.4, 0.0]])
        else:
            delta = rng.uniform(-1.0, 1.0, (3, 3))
            delta[2, 2] = 0.0
        A = np.eye(3) + s * b.geo_max_dev * delta
        A_pix = normalized_to_pixel(Tensor(A), h, w)
        return apply_geometric(Tensor(img), A_pix).data
    if name == "jpeg":
        quality = 100.0 - s * (100.0 - cfg.jpeg_min_quality)
        return jpeg_hard(img, quality)
    if name == "moire":
        amp = s * b.moire_amp_max
        if fixed:
            fx, fy, phi = 6.0, 4.0, 0.0
        else:
            fx, fy = rng.uniform(*b.moire_freq_range, size=2)
            phi = rng.uniform(0.0, 2 * math.pi)
        return apply_moire(Tensor(img), amp, fx, fy, phi).data
    if name == "filtering":
        k = gaussian_kernel(s * cfg.blur_sigma_max)
        return apply_filter(Tensor(img), k).data
    raise ConfigError(f"unknown distortion profile {name!r}; valid profiles: {', '.join(PROFILES)}")


_ALL_ORDER = ("moire", "perspective", "photometric", "additive", "filtering", "jpeg")


def manual_augment(
    x,
    profile: str,
    severity: float,
    rng: np.random.Generator,
    fixed: bool = False,
    settings: Optional[ManualSettings] = None,
) -> np.ndarray:
    """Hand-crafted, non-learnable distortion of a batch or single image.

    Parameters are drawn per image from the ranges in `ManualSettings` scaled by
    ``severity``; ``fixed`` replaces the draws with one canonical setting. The
    ``all`` profile chains the six distortions in composition order, each at a
    severity drawn uniformly from ``[0, severity]`` per image (``fixed``: at
    ``severity``). Output is clipped to [0, 1] like a real capture.
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown distortion profile {profile!r}; valid profiles: {', '.join(PROFILES)}")
    cfg = settings or ManualSettings()
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if severity <= 0:
        return arr.copy()
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        if profile == "all":
            y = img
            for name in _ALL_ORDER:
                s = severity if fixed else rng.uniform(0.0, severity)
                y = _manual_one(y, name, s, rng, fixed, cfg)
        else:
            y = _manual_one(img, profile, severity, rng, fixed, cfg)
        out[i] = np.clip(y, 0.0, 1.0)
    return out[0] if single else out


ManualFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]
