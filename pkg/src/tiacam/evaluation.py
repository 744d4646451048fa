"""Evaluation suites: feature invariance, pair separation, bit accuracy,
augmentor ablation and a linear probe. Every suite returns a `Report` whose
CSV form is a pure function of its inputs, config hash and seed."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import PROFILES, manual_augment
from .data import ImageDataset
from .errors import ConfigError, ConvergenceError, DataError
from .watermark import bit_accuracy, extract_from_feature, predict_bits, register, threshold

IDENTITY = "identity"
HELD_OUT = PROFILES[:6]

# Values reported for the full-scale system, carried as annotations only.
REFERENCE_COSINE_ALL = 0.94


@dataclass
class Report:
    name: str
    columns: tuple[str, ...]
    rows: list[dict]
    config_hash: str
    seed: int
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# report={self.name}\n# config_hash={self.config_hash}\n# seed={self.seed}\n")
        for note in self.notes:
            buf.write(f"# {note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".6f")
    return str(v)


def _take(dataset: ImageDataset, n: Optional[int]) -> ImageDataset:
    if n is None or n >= len(dataset):
        return dataset
    if n < 1:
        raise ConfigError("sample count must be positive")
    return dataset.subset(np.arange(n))


def features(pipeline, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [pipeline.features(images[i : i + chunk]).data for i in range(0, len(images), chunk)]
    return np.concatenate(out)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def _distort(images: np.ndarray, profile: str, severity: float, seed: int, salt: int) -> np.ndarray:
    if profile == IDENTITY:
        return images.copy()
    return manual_augment(images, profile, severity, np.random.default_rng([seed, salt]))


def _salt(profile: str) -> int:
    return (list(PROFILES) + [IDENTITY]).index(profile)


def _check_profiles(profiles: Sequence[str]) -> None:
    bad = [p for p in profiles if p not in PROFILES and p != IDENTITY]
    if bad:
        raise ConfigError(f"unknown distortion profile(s) {bad}; valid profiles: {', '.join(PROFILES)}, {IDENTITY}")


# ---------------------------------------------------------------------------
# invariance and separation


def eval_invariance(
    dataset: ImageDataset,
    pipeline,
    profiles: Sequence[str] = PROFILES,
    n: Optional[int] = None,
    seed: int = 0,
    severity: float = 1.0,
    config_hash: str = "",
) -> Report:
    """Mean cosine between features of each image and its hand-distorted copy."""
    _check_profiles(profiles)
    ds = _take(dataset, n)
    clean = features(pipeline, ds.images)
    rows = []
    for prof in profiles:
        dist = features(pipeline, _distort(ds.images, prof, severity, seed, _salt(prof)))
        c = _cos(clean, dist)
        rows.append({"profile": prof, "severity": severity, "mean_cos": float(c.mean()),
                     "std_cos": float(c.std()), "n": len(c)})
    notes = [f"reference (full-scale system, profile all): mean_cos {REFERENCE_COSINE_ALL}; annotation only"]
    return Report("invariance", ("profile", "severity", "mean_cos", "std_cos", "n"), rows, config_hash, seed, notes)


def pair_separation(clean: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> dict:
    return {
        "positive": float(_cos(clean, positive).mean()),
        "negative": float(_cos(clean, negative).mean()),
        "n": len(clean),
    }


def eval_pair_separation(
    dataset: ImageDataset,
    pipeline,
    n: Optional[int] = None,
    seed: int = 0,
    profile: str = "all",
    severity: float = 1.0,
) -> dict:
    """Positive: an image against its distorted copy. Negative: against an image of another class."""
    _check_profiles([profile])
    ds = _take(dataset, n)
    labels = np.asarray(ds.labels)
    if len(np.unique(labels)) < 2:
        raise DataError("pair separation needs at least two classes")
    rng = np.random.default_rng([seed, 99])
    partner = np.empty(len(labels), dtype=int)
    for i, lab in enumerate(labels):
        others = np.flatnonzero(labels != lab)
        partner[i] = others[rng.integers(len(others))]
    clean = features(pipeline, ds.images)
    dist = features(pipeline, _distort(ds.images, profile, severity, seed, _salt(profile)))
    return pair_separation(clean, dist, clean[partner])


# ---------------------------------------------------------------------------
# bit accuracy


def eval_bits(
    dataset: ImageDataset,
    pipeline,
    ks: Sequence[int] = (30,),
    profiles: Sequence[str] = ("all",),
    n: Optional[int] = None,
    seed: int = 0,
    severity: float = 1.0,
    d: int = 64,
    lambda_c: float = 1e-3,
    control: bool = True,
    config_hash: str = "",
) -> Report:
    """Register random messages on clean features, extract from distorted copies.

    Registration failures are counted in ``failures`` and excluded from the
    mean; ``n`` counts the successful registrations. The control rows score a
    signature registered on a different image (chance level expected).
    """
    _check_profiles(profiles)
    ds = _take(dataset, n)
    clean = features(pipeline, ds.images)
    dist = {p: features(pipeline, _distort(ds.images, p, severity, seed, _salt(p))) for p in profiles}
    digest = pipeline.digest()
    rows = []
    for k in ks:
        rng = np.random.default_rng([seed, k])
        sigs, msgs, failures = [], [], 0
        for i, image_id in enumerate(ds.ids):
            w = rng.integers(0, 2, k).astype(np.uint8)
            try:
                sigs.append(register(clean[i], w, d=d, lambda_c=lambda_c, seed=seed * 100_003 + i,
                                     image_id=image_id, checkpoint=digest))
                msgs.append(w)
            except ConvergenceError:
                sigs.append(None)
                msgs.append(None)
                failures += 1
        for prof in profiles:
            accs = [bit_accuracy(w, extract_from_feature(s, dist[prof][i])[0])
                    for i, (s, w) in enumerate(zip(sigs, msgs)) if s is not None]
            rows.append({"method": "registered", "profile": prof, "k": k,
                         "bit_acc": float(np.mean(accs)) if accs else float("nan"),
                         "n": len(accs), "failures": failures})
        if control:
            ok = [i for i, s in enumerate(sigs) if s is not None]
            accs = []
            for j, i in enumerate(ok):
                other = ok[(j + 1) % len(ok)]
                if other == i:
                    continue
                fake = extract_from_feature(sigs[other], clean[i])[0]
                accs.append(bit_accuracy(msgs[i], fake))
            rows.append({"method": "control", "profile": IDENTITY, "k": k,
                         "bit_acc": float(np.mean(accs)) if accs else float("nan"),
                         "n": len(accs), "failures": failures})
    return Report("bits", ("method", "profile", "k", "bit_acc", "n", "failures"), rows, config_hash, seed)


def random_signature_accuracy(features_: np.ndarray, k: int, trials: int, seed: int = 0, d: int = 64) -> float:
    """Mean bit accuracy of random, unregistered signatures against random messages."""
    rng = np.random.default_rng(seed)
    accs = []
    for t in range(trials):
        F = features_[t % len(features_)]
        C = rng.normal(size=(k, d))
        psi = rng.normal(size=(d, F.shape[-1]))
        w = rng.integers(0, 2, k)
        accs.append(bit_accuracy(w, threshold(predict_bits(C, psi @ F))))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# ablation


def eval_ablation_augmentor(
    dataset: ImageDataset,
    learned,
    manual,
    learned_config,
    manual_config,
    profiles: Sequence[str] = HELD_OUT,
    n: Optional[int] = None,
    seed: int = 0,
    severity: float = 1.0,
    ks: Sequence[int] = (30,),
) -> Report:
    """Side-by-side cosine and bit accuracy for learned versus manual augmentor training."""
    if learned_config.budget() != manual_config.budget():
        diff = sorted(k for k, v in learned_config.budget().items() if manual_config.budget().get(k) != v)
        raise ConfigError(f"ablation runs differ in training budget: {diff}")
    inv_a = eval_invariance(dataset, learned, profiles, n, seed, severity)
    inv_b = eval_invariance(dataset, manual, profiles, n, seed, severity)
    bits_a = eval_bits(dataset, learned, ks, profiles, n, seed, severity, control=False)
    bits_b = eval_bits(dataset, manual, ks, profiles, n, seed, severity, control=False)
    rows = []
    for ra, rb in zip(inv_a.rows, inv_b.rows):
        rows.append(_ablation_row(ra["profile"], "mean_cos", ra["mean_cos"], rb["mean_cos"], ra["n"]))
    for ra, rb in zip(bits_a.rows, bits_b.rows):
        rows.append(_ablation_row(ra["profile"], f"bit_acc_k{ra['k']}", ra["bit_acc"], rb["bit_acc"], min(ra["n"], rb["n"])))
    cols = ("profile", "metric", "learned", "manual", "delta", "higher", "n")
    return Report("ablation", cols, rows, learned_config.digest() + "+" + manual_config.digest(), seed)


def _ablation_row(profile: str, metric: str, a: float, b: float, n: int) -> dict:
    delta = a - b
    higher = "tie" if delta == 0 else ("learned" if delta > 0 else "manual")
    return {"profile": profile, "metric": metric, "learned": a, "manual": b, "delta": delta, "higher": higher, "n": n}


# ---------------------------------------------------------------------------
# linear probe


def fit_linear_probe(X: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 300, lr: float = 0.5,
                     weight_decay: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on softmax cross-entropy."""
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(X)
        W -= lr * (X.T @ g + weight_decay * W)
        b -= lr * g.sum(axis=0)
    return W, b


def topk_accuracy(scores: np.ndarray, y: np.ndarray, k: int) -> float:
    k = min(k, scores.shape[1])
    # stable ordering: ties broken by class index
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean([y[i] in order[i] for i in range(len(y))]))


def linear_probe(
    dataset: ImageDataset,
    pipeline,
    train_frac: float = 0.5,
    epochs: int = 300,
    seed: int = 0,
    profile: str = "all",
    severity: float = 1.0,
    lr: float = 0.5,
) -> dict:
    """Softmax probe on frozen clean features; accuracy on distorted held-out images."""
    labels = np.asarray(dataset.labels)
    n_classes = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise DataError("linear probe needs at least two classes")
    rng = np.random.default_rng([seed, 7])
    perm = rng.permutation(len(labels))
    n_train = max(1, int(round(train_frac * len(labels))))
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if len(te) == 0:
        raise ConfigError("train fraction leaves no test images")
    X_tr = features(pipeline, dataset.images[tr])
    X_te = features(pipeline, _distort(dataset.images[te], profile, severity, seed, _salt(profile)))
    W, b = fit_linear_probe(X_tr, labels[tr], n_classes, epochs, lr)
    scores = X_te @ W + b
    top1 = topk_accuracy(scores, labels[te], 1)
    if n_classes < 5:
        warnings.warn(f"only {n_classes} classes: top-5 accuracy reported as 1.0", stacklevel=2)
        top5 = 1.0
    else:
        top5 = topk_accuracy(scores, labels[te], 5)
    return {"top1": top1, "top5": top5, "n_train": len(tr), "n_test": len(te)}


def probe_report(result: dict, config_hash: str, seed: int) -> Report:
    row = dict(result)
    return Report("probe", ("top1", "top5", "n_train", "n_test"), [row], config_hash, seed)


# ---------------------------------------------------------------------------
# plotting


def svg_bar_chart(report: Report, label: str, values: Sequence[str], title: str = "") -> str:
    """Grouped bar chart of ``values`` columns per ``label`` row, as standalone SVG."""
    rows = report.rows
    width, height, pad = 80 + 60 * len(rows) * max(1, len(values)), 260, 40
    vmax = max([abs(float(r[v])) for r in rows for v in values] + [1e-12])
    colors = ("#4c72b0", "#dd8452", "#55a868", "#c44e52")
    bar = 50 / max(1, len(values))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - 10}" y2="{height - pad}" stroke="black"/>',
    ]
    plot_h = height - 2 * pad - 10
    for i, r in enumerate(rows):
        x0 = pad + 10 + i * 60 * max(1, len(values))
        for j, v in enumerate(values):
            h = plot_h * max(float(r[v]), 0.0) / vmax
            parts.append(
                f'<rect x="{x0 + j * bar:.1f}" y="{height - pad - h:.1f}" width="{bar - 2:.1f}" '
                f'height="{h:.1f}" fill="{colors[j % len(colors)]}"><title>{v}={float(r[v]):.4f}</title></rect>'
            )
        parts.append(
            f'<text x="{x0}" y="{height - pad + 14}" font-family="sans-serif" font-size="10">{r[label]}</text>'
        )
    for j, v in enumerate(values):
        parts.append(
            f'<text x="{width - 120}" y="{20 + 14 * j}" font-family="sans-serif" font-size="10" '
            f'fill="{colors[j % len(colors)]}">{v}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
