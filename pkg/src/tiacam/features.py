"""Frozen backbone providers, the trainable invariant extractor and text anchors."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import DataError, ShapeError
from .nn import EVAL, BatchNorm1d, Linear, Module, RunContext, dropout

# ---------------------------------------------------------------------------
# backbones


class PrecomputedBackbone:
    """Lookup of externally computed embeddings (e.g. exported CLIP features)."""

    kind = "precomputed"

    def __init__(self, store: dict[str, np.ndarray], dim: Optional[int] = None):
        dims = {np.asarray(v).shape for v in store.values()}
        if dim is None:
            if len(dims) != 1:
                raise ShapeError(f"embedding store has mixed shapes {sorted(dims)}")
            dim = next(iter(dims))[0]
        for key, v in store.items():
            if np.asarray(v).shape != (dim,):
                raise ShapeError(f"embedding {key!r} has shape {np.asarray(v).shape}, expected ({dim},)")
        self.store = {k: np.asarray(v, dtype=np.float64) for k, v in store.items()}
        self.dim_out = dim

    def encode(self, ids: Union[str, Sequence[str]]) -> Tensor:
        single = isinstance(ids, str)
        keys = [ids] if single else list(ids)
        rows = []
        for key in keys:
            if key not in self.store:
                raise DataError(f"no embedding for id {key!r}")
            rows.append(self.store[key])
        out = np.stack(rows)
        return Tensor(out[0] if single else out)

    def config(self) -> dict:
        h = hashlib.sha256()
        for key in sorted(self.store):
            h.update(key.encode("utf-8") + b"\0" + self.store[key].tobytes())
        return {"kind": self.kind, "dim_out": self.dim_out, "digest": h.hexdigest()}


class RandomProjectionBackbone:
    """Frozen two-layer random map over centred, flattened pixels.

    ``x -> tanh((x - c) W1 + b1) W2`` with ``W1`` scaled by ``1/sqrt(P)`` and
    ``W2`` by ``1/sqrt(hidden)``. Built from engine ops on constant tensors, so
    gradients may reach the pixels but never the map itself.
    """

    kind = "frozen-random-projection"

    def __init__(
        self,
        image_shape: tuple[int, int, int],
        dim_out: int = 64,
        hidden: int = 512,
        seed: int = 0,
        pixel_center: float = 0.5,
        bias: bool = False,
        gain: float = 2.0,
    ):
        self.image_shape = tuple(image_shape)
        self.dim_out = dim_out
        self.seed = seed
        self.pixel_center = pixel_center
        n_in = int(np.prod(image_shape))
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((n_in, hidden)) * (gain / np.sqrt(n_in))
        self.b1 = rng.uniform(-0.5, 0.5, hidden) if bias else np.zeros(hidden)
        self.w2 = rng.standard_normal((hidden, dim_out)) / np.sqrt(hidden)

    def encode(self, x) -> Tensor:
        x = as_tensor(x)
        single = x.shape == self.image_shape
        if not single and tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"backbone expects images of shape {self.image_shape}, got {x.shape}")
        flat = ops.reshape(x, (1 if single else x.shape[0], -1))
        h = ops.tanh(ops.add(ops.matmul(ops.sub(flat, self.pixel_center), self.w1), self.b1))
        out = ops.matmul(h, self.w2)
        return ops.reshape(out, (self.dim_out,)) if single else out

    def config(self) -> dict:
        return {
            "kind": self.kind, "image_shape": list(self.image_shape), "dim_out": self.dim_out,
            "hidden": self.w1.shape[1], "seed": self.seed, "pixel_center": self.pixel_center,
            "bias": bool(self.b1.any()),
        }


def backbone_encode(provider, item) -> Tensor:
    return provider.encode(item)


# ---------------------------------------------------------------------------
# invariant extractor


class ResidualBlock(Module):
    """``relu(BN2(W2 drop(relu(BN1(W1 h)))) + h)``."""

    def __init__(self, dim: int, rng: np.random.Generator, p_drop: float = 0.1):
        super().__init__()
        self.fc1 = Linear(dim, dim, rng)
        self.bn1 = BatchNorm1d(dim)
        self.fc2 = Linear(dim, dim, rng)
        self.bn2 = BatchNorm1d(dim)
        self.p_drop = p_drop

    def __call__(self, h: Tensor, ctx: RunContext = EVAL) -> Tensor:
        z = ops.relu(self.bn1(self.fc1(h, ctx), ctx))
        z = dropout(z, self.p_drop, ctx)
        z = self.bn2(self.fc2(z, ctx), ctx)
        return ops.relu(ops.add(z, h))


class _LinearBlock(Module):
    """Linear, batch-norm, optional ReLU and dropout."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, act: bool = True, p_drop: float = 0.1):
        super().__init__()
        self.fc = Linear(n_in, n_out, rng)
        self.bn = BatchNorm1d(n_out)
        self.act = act
        self.p_drop = p_drop

    def __call__(self, x: Tensor, ctx: RunContext = EVAL) -> Tensor:
        y = self.bn(self.fc(x, ctx), ctx)
        if self.act:
            y = dropout(ops.relu(y), self.p_drop, ctx)
        return y


class InvariantExtractor(Module):
    """Residual MLP head mapping backbone features to invariant embeddings.

    input block, ``n_blocks`` residual blocks, a fusion block, then a
    projection head ``dim -> dim/2 -> dim`` ending in Linear-BN, and optional
    l2 normalisation.
    """

    def __init__(
        self,
        dim_in: int = 768,
        dim: int = 1024,
        seed: int = 0,
        n_blocks: int = 3,
        p_drop: float = 0.1,
        normalize: bool = True,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.dim_in = dim_in
        self.dim = dim
        self.normalize = normalize
        self.input = _LinearBlock(dim_in, dim, rng, p_drop=p_drop)
        self.blocks = [ResidualBlock(dim, rng, p_drop) for _ in range(n_blocks)]
        self.fusion = _LinearBlock(dim, dim, rng, p_drop=p_drop)
        self.head1 = _LinearBlock(dim, dim // 2, rng, p_drop=p_drop)
        self.head2 = _LinearBlock(dim // 2, dim, rng, act=False)

    def __call__(self, f, ctx: RunContext = EVAL) -> Tensor:
        f = as_tensor(f)
        single = f.ndim == 1
        if f.shape[-1] != self.dim_in:
            raise ShapeError(f"extractor expects {self.dim_in}-D input, got {f.shape}")
        h = ops.reshape(f, (1, self.dim_in)) if single else f
        h = self.input(h, ctx)
        for block in self.blocks:
            h = block(h, ctx)
        h = self.fusion(h, ctx)
        h = self.head2(self.head1(h, ctx), ctx)
        if self.normalize:
            h = ops.l2_normalize(h)
        return ops.reshape(h, (self.dim,)) if single else h

    def config(self) -> dict:
        return {
            "dim_in": self.dim_in, "dim": self.dim, "n_blocks": len(self.blocks),
            "p_drop": self.input.p_drop, "normalize": self.normalize,
        }


def extract_invariant(theta: InvariantExtractor, f, mode: str = "eval", rng=None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return theta(f, RunContext(training=mode == "train", rng=rng))


@dataclass
class Pipeline:
    """Frozen backbone followed by the invariant extractor."""

    backbone: object
    theta: InvariantExtractor

    def features(self, x, ctx: RunContext = EVAL) -> Tensor:
        return self.theta(self.backbone.encode(x), ctx)

    def digest(self) -> str:
        """Hash of the backbone configuration and every extractor array."""
        h = hashlib.sha256(json.dumps(self.backbone.config(), sort_keys=True).encode())
        for name, arr in sorted(self.theta.state_dict().items()):
            h.update(f"{name}|{arr.dtype.str}|{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# text anchors


@dataclass
class AnchorSet:
    vectors: dict[str, np.ndarray]
    pairing: dict[str, str]  # image id -> positive anchor id

    def __post_init__(self):
        self.ids = sorted(self.vectors)
        for image_id, anchor in self.pairing.items():
            if anchor not in self.vectors:
                raise DataError(f"image {image_id!r} pairs with unknown anchor {anchor!r}")
        self.matrix = np.stack([self.vectors[a] for a in self.ids]) if self.ids else np.zeros((0, 0))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def synthetic(cls, n_classes: int, dim: int, pairing: dict[str, str], seed: int = 0) -> "AnchorSet":
        """One frozen random unit vector per class id ``class_<c>``."""
        rng = np.random.default_rng(seed)
        vecs = rng.standard_normal((n_classes, dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        return cls({f"class_{c}": vecs[c] for c in range(n_classes)}, dict(pairing))

    @classmethod
    def for_dataset(cls, dataset, dim: int, seed: int = 0) -> "AnchorSet":
        """Anchors from the dataset's embedding bundle, else one random unit vector per paired anchor id."""
        targets = sorted(set(dataset.pairing.values()))
        if dataset.bundle:
            missing = [t for t in targets if t not in dataset.bundle]
            if missing:
                raise DataError(f"embedding bundle lacks anchors {missing[:5]}")
            vecs = {t: np.asarray(dataset.bundle[t], dtype=np.float64) for t in targets}
            if any(v.shape != (dim,) for v in vecs.values()):
                raise DataError(f"bundle anchors must be {dim}-D to match the feature dimension")
            return cls(vecs, dict(dataset.pairing))
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((len(targets), dim))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        return cls(dict(zip(targets, m)), dict(dataset.pairing))

    def positive(self, image_id: str) -> str:
        try:
            return self.pairing[image_id]
        except KeyError:
            raise DataError(f"no anchor paired with image {image_id!r}") from None


@dataclass
class PairBatch:
    indices: np.ndarray
    image_ids: list[str]
    images: np.ndarray
    pos_ids: list[str]
    neg_ids: list[str]
    pos: np.ndarray
    neg: np.ndarray


def sample_pair_batch(anchors: AnchorSet, images, batch: int, rng: np.random.Generator) -> PairBatch:
    """Draw ``batch`` images with their positive anchor and a uniformly drawn other anchor."""
    n_anchor = len(anchors.ids)
    if n_anchor < 2:
        raise DataError("cannot sample negatives: need at least two distinct anchors")
    n = len(images.ids)
    if batch < 1 or n == 0:
        raise DataError("batch size and dataset must be nonempty")
    idx = rng.choice(n, size=batch, replace=batch > n)
    ids = [images.ids[i] for i in idx]
    pos_ids = [anchors.positive(i) for i in ids]
    pos_index = np.array([anchors.ids.index(a) for a in pos_ids])
    shift = rng.integers(1, n_anchor, size=batch)
    neg_index = (pos_index + shift) % n_anchor
    neg_ids = [anchors.ids[j] for j in neg_index]
    return PairBatch(
        idx, ids, images.images[idx], pos_ids, neg_ids,
        anchors.matrix[pos_index], anchors.matrix[neg_index],
    )


# ---------------------------------------------------------------------------
# embedding bundle (TIAC)

BUNDLE_MAGIC = b"TIAC"
BUNDLE_VERSION = 1


def write_bundle(path, vectors: dict[str, np.ndarray]) -> None:
    dims = {np.asarray(v).shape for v in vectors.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ShapeError(f"bundle vectors must share one 1-D shape, got {sorted(dims)}")
    dim = next(iter(dims))[0]
    parts = [BUNDLE_MAGIC, struct.pack("<III", BUNDLE_VERSION, len(vectors), dim)]
    for key in sorted(vectors):
        raw = key.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(np.asarray(vectors[key], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_bundle(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != BUNDLE_MAGIC:
        raise DataError(f"{path}: not an embedding bundle (bad magic at byte 0)")
    if len(buf) < 16:
        raise DataError(f"{path}: truncated bundle header at byte {len(buf)}")
    version, count, dim = struct.unpack_from("<III", buf, 4)
    if version != BUNDLE_VERSION:
        raise DataError(f"{path}: unsupported bundle version {version} at byte 4")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        if pos + 4 > len(buf):
            raise DataError(f"{path}: truncated bundle record at byte {start}")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n + 4 * dim > len(buf):
            raise DataError(f"{path}: truncated bundle record at byte {start}")
        key = buf[pos : pos + n].decode("utf-8")
        pos += n
        if key in out:
            raise DataError(f"{path}: duplicate bundle id {key!r}")
        out[key] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes after last record at byte {pos}")
    return out
