"""Zero-watermarking over frozen invariant features.

A message is never written into pixels. Registration fits a code matrix ``C``
and a projection ``Psi`` so that ``sigmoid(C (Psi F))`` reproduces the bits;
extraction recomputes the feature of a (possibly distorted) image and
thresholds the same projections.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ConvergenceError, DataError, ShapeError

SIG_MAGIC = b"TIWM"
SIG_VERSION = 1
BCE_TARGET = 0.05
INIT_STD = 0.01


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def as_message(bits) -> np.ndarray:
    w = np.asarray(bits)
    if w.ndim != 1 or w.size == 0:
        raise ShapeError(f"message must be a nonempty 1-D bit array, got shape {w.shape}")
    if not np.isin(w, (0, 1)).all():
        raise ValueError("message bits must be 0 or 1")
    return w.astype(np.uint8)


def parse_bits(spec: str, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``random:k`` draws k bits from ``rng``; otherwise hex digits, most significant bit first."""
    if spec.startswith("random:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad bit count in {spec!r}") from None
        if k < 1:
            raise ConfigError("bit count must be positive")
        return (rng or np.random.default_rng()).integers(0, 2, k).astype(np.uint8)
    text = spec[2:] if spec.lower().startswith("0x") else spec
    try:
        value = bytes.fromhex(text if len(text) % 2 == 0 else "0" + text)
    except ValueError:
        raise ConfigError(f"bits must be hex or random:k, got {spec!r}") from None
    bits = np.unpackbits(np.frombuffer(value, dtype=np.uint8))
    return bits[len(bits) - 4 * len(text):]


def format_bits(bits) -> str:
    return "".join(str(int(b)) for b in bits)


@dataclass
class WatermarkSignature:
    C: np.ndarray  # (k, d)
    psi: np.ndarray  # (d, D)
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.C.shape[0]

    @property
    def d(self) -> int:
        return self.C.shape[1]


def encode_feature(psi: np.ndarray, F) -> np.ndarray:
    """Global average pooling over any leading spatial axes, then ``psi @ pooled``.

    A plain D-vector is a 1x1xD map, for which pooling is the identity.
    """
    F = np.asarray(F, dtype=np.float64)
    pooled = F if F.ndim == 1 else F.reshape(-1, F.shape[-1]).mean(axis=0)
    if psi.shape[1] != pooled.shape[0]:
        raise ShapeError(f"projection expects {psi.shape[1]}-D features, got {pooled.shape[0]}")
    return psi @ pooled


def predict_bits(C: np.ndarray, Ft: np.ndarray) -> np.ndarray:
    if C.shape[1] != Ft.shape[-1]:
        raise ShapeError(f"code matrix has {C.shape[1]} columns, encoded feature has {Ft.shape[-1]}")
    return _sigmoid(C @ Ft)


def threshold(probs: np.ndarray) -> np.ndarray:
    """Bit 1 iff the probability is at least one half (ties go to 1)."""
    return (probs >= 0.5).astype(np.uint8)


def bce(w: np.ndarray, p: np.ndarray, eps: float = 1e-12) -> float:
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(w * np.log(p) + (1 - w) * np.log(1 - p)))


def _objective(C, psi, F, w, lambda_c):
    z = C @ (psi @ F)
    return bce(w, _sigmoid(z)) + lambda_c * float(np.sum(C * C))


def register(
    F,
    bits,
    d: int = 64,
    lambda_c: float = 1e-3,
    eta: float = 1.0,
    steps: int = 3000,
    seed: int = 0,
    image_id: str = "",
    checkpoint: str = "",
    history: Optional[list] = None,
) -> WatermarkSignature:
    """Gradient descent on ``BCE(W, sigmoid(C Psi F)) + lambda_c |C|^2`` over ``C`` and ``Psi``.

    The step size is halved whenever a step would raise the objective, so the
    objective is non-increasing. Stops once every bit is reproduced and the BCE
    is below ``BCE_TARGET``; raises `ConvergenceError` otherwise.
    """
    if steps < 1:
        raise ConfigError("registration needs at least one step")
    if eta <= 0:
        raise ConfigError("registration step size must be positive")
    w = as_message(bits).astype(np.float64)
    F = np.asarray(F, dtype=np.float64)
    F = F if F.ndim == 1 else F.reshape(-1, F.shape[-1]).mean(axis=0)
    k, D = w.size, F.size
    rng = np.random.default_rng(seed)
    C = rng.normal(0.0, INIT_STD, (k, d))
    psi = rng.normal(0.0, INIT_STD, (d, D))
    loss = _objective(C, psi, F, w, lambda_c)
    lr = eta
    done = 0
    for step in range(1, steps + 1):
        ft = psi @ F
        p = _sigmoid(C @ ft)
        if bce(w, p) < BCE_TARGET and np.array_equal(threshold(p), w.astype(np.uint8)):
            break
        gz = (p - w) / k
        gC = np.outer(gz, ft) + 2.0 * lambda_c * C
        gpsi = np.outer(C.T @ gz, F)
        while True:
            C_new, psi_new = C - lr * gC, psi - lr * gpsi
            new_loss = _objective(C_new, psi_new, F, w, lambda_c)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        C, psi, loss = C_new, psi_new, new_loss
        done = step
        if history is not None:
            history.append(bce(w, _sigmoid(C @ (psi @ F))))
    # stored at single precision; the checks below run on the stored values
    C32, psi32 = C.astype(np.float32), psi.astype(np.float32)
    p = predict_bits(C32.astype(np.float64), encode_feature(psi32.astype(np.float64), F))
    final = bce(w, p)
    acc = bit_accuracy(w.astype(np.uint8), threshold(p))
    if final >= BCE_TARGET or acc < 1.0:
        raise ConvergenceError(
            f"registration did not converge: BCE {final:.4f}, clean bit accuracy {acc:.3f} after {done} steps"
        )
    meta = {
        "image_id": image_id, "seed": seed, "lambda_c": lambda_c, "steps": done,
        "checkpoint": checkpoint, "final_bce": final, "self_check": "pass",
    }
    return WatermarkSignature(C32.astype(np.float64), psi32.astype(np.float64), meta)


def extract_from_feature(sig: WatermarkSignature, F) -> tuple[np.ndarray, np.ndarray]:
    """Bits and per-bit probabilities for an invariant feature."""
    probs = predict_bits(sig.C, encode_feature(sig.psi, F))
    return threshold(probs), probs


def extract(sig: WatermarkSignature, image, pipeline) -> tuple[np.ndarray, np.ndarray]:
    """Extraction from an image through the same frozen pipeline used at registration."""
    expected = sig.metadata.get("checkpoint", "")
    actual = pipeline.digest()
    if expected != actual:
        raise ConfigError(f"signature was registered with pipeline {expected!r}, extraction uses {actual!r}")
    return extract_from_feature(sig, pipeline.features(image).data)


def bit_accuracy(w, w_hat) -> float:
    w, w_hat = np.asarray(w), np.asarray(w_hat)
    if w.shape != w_hat.shape:
        raise ShapeError(f"message lengths differ: {w.size} vs {w_hat.size}")
    return float(np.mean(w == w_hat))


def write_signature(path, sig: WatermarkSignature) -> None:
    meta = json.dumps(sig.metadata, sort_keys=True).encode("utf-8")
    out = bytearray(SIG_MAGIC + struct.pack("<IIII", SIG_VERSION, sig.k, sig.d, sig.psi.shape[1]))
    out += sig.C.astype("<f4").tobytes()
    out += sig.psi.astype("<f4").tobytes()
    out += struct.pack("<I", len(meta)) + meta
    Path(path).write_bytes(bytes(out))


def read_signature(path) -> WatermarkSignature:
    raw = Path(path).read_bytes()
    if raw[:4] != SIG_MAGIC:
        raise DataError(f"{path}: not a signature file (bad magic at byte 0)")
    if len(raw) < 20:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    version, k, d, D = struct.unpack_from("<IIII", raw, 4)
    if version != SIG_VERSION:
        raise DataError(f"{path}: unsupported signature version {version}")
    pos = 20
    need = 4 * (k * d + d * D) + 4
    if len(raw) < pos + need:
        raise DataError(f"{path}: truncated payload at byte {len(raw)}")
    C = np.frombuffer(raw, "<f4", k * d, pos).reshape(k, d)
    pos += 4 * k * d
    psi = np.frombuffer(raw, "<f4", d * D, pos).reshape(d, D)
    pos += 4 * d * D
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + mlen:
        raise DataError(f"{path}: truncated metadata at byte {pos}")
    try:
        meta = json.loads(raw[pos : pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: unreadable metadata at byte {pos}") from None
    return WatermarkSignature(C.astype(np.float64), psi.astype(np.float64), meta)
