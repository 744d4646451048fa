"""Image datasets: synthetic shape generator, PPM/PNG IO and manifest ingestion."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError

SHAPES = ("disc", "square", "triangle", "ring")


@dataclass
class ImageDataset:
    ids: list[str]
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int class index
    class_names: list[str]
    pairing: dict[str, str] = field(default_factory=dict)  # image id -> anchor id
    bundle: Optional[dict[str, np.ndarray]] = None

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise DataError("dataset ids must be unique")
        if len(self.ids) != len(self.images) or len(self.ids) != len(self.labels):
            raise DataError("dataset ids, images and labels differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def index(self, image_id: str) -> int:
        try:
            return self.ids.index(image_id)
        except ValueError:
            raise DataError(f"unknown image id {image_id!r}") from None

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        ids = [self.ids[i] for i in idx]
        return ImageDataset(
            ids, self.images[idx], self.labels[idx], self.class_names,
            {i: self.pairing[i] for i in ids if i in self.pairing}, self.bundle,
        )


# ---------------------------------------------------------------------------
# synthetic shapes


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random background: low-frequency cosines plus a colour gradient."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.6, 3)
    tex = np.zeros((size, size, 3))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.08, 3)
        tex += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)[..., None]
    grad = rng.uniform(-0.1, 0.1, 3) * xx[..., None] + rng.uniform(-0.1, 0.1, 3) * yy[..., None]
    return np.clip(base + tex + grad, 0.0, 1.0)


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disc":
        return (dx**2 + dy**2 <= r**2).astype(float)
    if kind == "square":
        return ((np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)).astype(float)
    if kind == "triangle":
        # upward triangle in the rotated frame
        return ((v <= r * 0.6) & (v >= -r + 2.0 * np.abs(u) * 0.9)).astype(float)
    if kind == "ring":
        d2 = dx**2 + dy**2
        return ((d2 <= r**2) & (d2 >= (0.55 * r) ** 2)).astype(float)
    raise ValueError(f"unknown shape {kind!r}")


def synthetic_dataset(n: int = 64, size: int = 32, n_classes: int = 4, seed: int = 0) -> ImageDataset:
    """Coloured shapes on smooth textured backgrounds; the class is the shape."""
    if not 2 <= n_classes <= len(SHAPES):
        raise DataError(f"n_classes must be in [2, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3))
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    for i in range(n):
        kind = SHAPES[labels[i]]
        bg = _texture(rng, size)
        r = rng.uniform(0.22, 0.34) * size
        cx, cy = rng.uniform(0.35, 0.65, 2) * size
        mask = _shape_mask(kind, size, cx, cy, r, rng.uniform(0, 2 * np.pi))[..., None]
        color = rng.uniform(0.0, 1.0, 3)
        # keep the shape visibly distinct from its background
        if np.abs(color - bg.mean(axis=(0, 1))).sum() < 0.6:
            color = 1.0 - color
        images[i] = np.clip(mask * color + (1 - mask) * bg, 0.0, 1.0)
    ids = [f"img{i:04d}" for i in range(n)]
    names = [SHAPES[c] for c in range(n_classes)]
    pairing = {ids[i]: f"class_{labels[i]}" for i in range(n)}
    return ImageDataset(ids, images, labels.astype(np.int64), names, pairing)


# ---------------------------------------------------------------------------
# PPM / PNG


def _ppm_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError(f"malformed PPM header: unexpected end of data at byte {start}")
    return buf[start:pos], start, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode binary P6 PPM bytes to an (H, W, 3) float array in [0, 1]."""
    if buf[:2] != b"P6":
        raise DataError("malformed PPM header: expected magic 'P6' at byte 0")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _ppm_token(buf, pos)
        if not tok.isdigit() or int(tok) <= 0:
            raise DataError(f"malformed PPM header: invalid {name} {tok!r} at byte {start}")
        if name == "maxval" and int(tok) > 255:
            raise DataError(f"malformed PPM header: only 8-bit PPM supported (maxval {int(tok)}) at byte {start}")
        values.append(int(tok))
    width, height, maxval = values
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DataError(f"malformed PPM header: missing whitespace before raster at byte {pos}")
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise DataError(f"truncated PPM raster: need {need} bytes from byte {pos}, have {len(buf) - pos}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return raster.reshape(height, width, 3).astype(np.float64) / maxval


def encode_ppm(img: np.ndarray) -> bytes:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) image, got {arr.shape}")
    h, w = arr.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover - optional dependency
            raise DataError("PNG input needs Pillow (pip install 'artifact[png]')") from None
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    try:
        return decode_ppm(buf)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_image(path, img) -> None:
    Path(path).write_bytes(encode_ppm(img))


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize (half-pixel centres) to ``size x size``; no-op at matching size."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img
    ys = np.clip((np.arange(size) + 0.5) * h / size - 0.5, 0, h - 1)
    xs = np.clip((np.arange(size) + 0.5) * w / size - 0.5, 0, w - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# pairing table and manifest


def read_pairing(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(parts):
                raise DataError(f"{path}:{lineno}: expected 'image_id<TAB>anchor_id'")
            if parts[0] in pairs:
                raise DataError(f"{path}:{lineno}: duplicate image id {parts[0]!r}")
            pairs[parts[0]] = parts[1]
    return pairs


def write_pairing(path, pairing: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(pairing):
            fh.write(f"{k}\t{pairing[k]}\n")


def ingest(directory, manifest: str = "manifest.json", size: int = 32) -> ImageDataset:
    """Load a dataset described by a JSON manifest inside ``directory``.

    Manifest keys: ``images`` (list of {id, file, label}), ``pairing`` (TSV
    path), optional ``bundle`` (TIAC embedding file) and ``classes``.
    """
    from .features import read_bundle

    root = Path(directory)
    mpath = root / manifest
    try:
        spec = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {mpath}: {exc}") from None
    entries = spec.get("images")
    if not entries:
        raise DataError(f"{mpath}: manifest lists no images")
    if "pairing" not in spec:
        raise DataError(f"{mpath}: manifest has no pairing table")
    ids, images, labels = [], [], []
    for e in entries:
        img = read_image(root / e["file"])
        images.append(resize(img, size))
        ids.append(str(e["id"]))
        labels.append(int(e.get("label", 0)))
    pairing = read_pairing(root / spec["pairing"])
    known = set(ids)
    for image_id in pairing:
        if image_id not in known:
            raise DataError(f"pairing table references unknown image id {image_id!r}")
    for image_id in ids:
        if image_id not in pairing:
            raise DataError(f"missing pairing for image id {image_id!r}")
    n_classes = max(labels) + 1
    classes = spec.get("classes") or [f"class_{c}" for c in range(n_classes)]
    bundle = read_bundle(root / spec["bundle"]) if spec.get("bundle") else None
    return ImageDataset(ids, np.stack(images), np.asarray(labels, dtype=np.int64), list(classes), pairing, bundle)


def dump_dataset(ds: ImageDataset, directory, manifest: str = "manifest.json") -> Path:
    """Write images as PPM plus manifest and pairing table; inverse of `ingest`."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for image_id, img, label in zip(ds.ids, ds.images, ds.labels):
        name = f"{image_id}.ppm"
        write_image(root / name, img)
        entries.append({"id": image_id, "file": name, "label": int(label)})
    write_pairing(root / "pairs.tsv", ds.pairing)
    spec = {"images": entries, "pairing": "pairs.tsv", "classes": ds.class_names}
    path = root / manifest
    path.write_text(json.dumps(spec, indent=1) + "\n", encoding="utf-8")
    return path


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(directory) -> str:
    """Digest of every file under ``directory`` (names and contents)."""
    import hashlib

    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(directory)):
        for name in sorted(files):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(directory)).encode())
            h.update(file_digest(p).encode())
    return h.hexdigest()
