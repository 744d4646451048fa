"""Three-way alternating training: discriminator, auto-augmentor, extractor.

Every phase minimises a stored loss. The augmentor ascends its objective by
stepping Adam with ``sign=-1``; the discriminator minimises the negated pair
log-likelihood.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .augment import (
    COMPOSITION_ORDER,
    AugmentorParams,
    ParamBounds,
    clamp_params,
    compose_augment,
    manual_augment,
)
from .autodiff import Tensor, backward, ops
from .data import ImageDataset, synthetic_dataset
from .discriminator import PairDiscriminator
from .errors import ConfigError, DataError, NonFiniteError
from .features import AnchorSet, InvariantExtractor, PairBatch, Pipeline, RandomProjectionBackbone, sample_pair_batch
from .losses import ProbePyramid, loss_adv, loss_disc, loss_inv, loss_sem, mse, ssim
from .nn import RunContext, calibrate_batchnorm
from .optim import Adam

METRIC_COLUMNS = ("round", "loss_disc", "loss_adv", "loss_inv", "loss_sem", "mean_cos")

AUGMENTOR_INITS = ("default", "identity", "pretrained")

# hand-crafted profile each learnable module imitates during pretraining
MODULE_TARGETS = {
    "moire": "moire",
    "geometric": "perspective",
    "photometric": "photometric",
    "additive": "additive",
    "filter": "filtering",
    "compression": "jpeg",
}

MODULE_PARAMS = {
    "moire": ("moire_amp", "moire_fx", "moire_fy"),
    "geometric": ("A",),
    "photometric": ("photo_alpha", "photo_beta", "photo_gamma"),
    "additive": ("noise_sigma", "sp_rate"),
    "filter": ("kernel",),
    "compression": ("mask", "quant_sharpness"),
}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_augmentor: Optional[float] = None
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lambda_adv: float = 1.0
    lambda_sem: float = 1.0
    lambda_c: float = 1e-3
    batch_size: int = 16
    n_d: int = 1
    n_a: int = 1
    n_f: int = 1
    rounds: int = 200
    seed: int = 0
    inv_in_extractor: bool = True
    learn_augmentor: bool = True
    manual_profile: str = "all"
    manual_severity: float = 0.5
    augmentor_init: str = "default"
    pretrain_pairs: int = 500
    pretrain_epochs: int = 3
    bounds: dict = field(default_factory=dict)
    precision: str = "f64"
    image_size: int = 32
    backbone_dim: int = 64
    backbone_hidden: int = 512
    backbone_seed: int = 0
    feat_dim: int = 128
    extractor_blocks: int = 3
    p_drop: float = 0.1
    disc_hidden: int = 64
    disc_layers: int = 2
    disc_heads: int = 2
    probe_channels: int = 8
    anchor_seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lr_augmentor is not None and not self.lr_augmentor > 0:
            raise ConfigError(f"lr_augmentor must be positive, got {self.lr_augmentor}")
        for name in ("lambda_adv", "lambda_sem", "lambda_c"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("n_d", "n_a", "n_f", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.augmentor_init not in AUGMENTOR_INITS:
            raise ConfigError(f"augmentor_init must be one of {AUGMENTOR_INITS}, got {self.augmentor_init!r}")
        ParamBounds.from_dict(self.bounds)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def param_bounds(self) -> ParamBounds:
        return ParamBounds.from_dict(self.bounds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def budget(self) -> dict:
        """Everything except augmentor learnability (ablation runs must agree on it)."""
        d = self.to_dict()
        for k in ("learn_augmentor", "manual_profile", "manual_severity", "lr_augmentor"):
            d.pop(k)
        return d


@dataclass
class TrainState:
    config: TrainConfig
    backbone: RandomProjectionBackbone
    theta: InvariantExtractor
    psi: PairDiscriminator
    aug: AugmentorParams
    probe: ProbePyramid
    opt_f: Adam
    opt_d: Adam
    opt_a: Adam
    rng: np.random.Generator
    round: int = 0
    step: int = 0

    @property
    def pipeline(self) -> Pipeline:
        return Pipeline(self.backbone, self.theta)


def init_state(config: TrainConfig, dataset: Optional[ImageDataset] = None) -> TrainState:
    """Fresh state. With a dataset, batch-norm statistics are set from its clean features."""
    ss = np.random.SeedSequence(config.seed)
    theta_seed, psi_seed, rng_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    size = config.image_size
    backbone = RandomProjectionBackbone(
        (size, size, 3), config.backbone_dim, config.backbone_hidden, seed=config.backbone_seed
    )
    theta = InvariantExtractor(
        config.backbone_dim, config.feat_dim, seed=theta_seed, n_blocks=config.extractor_blocks, p_drop=config.p_drop
    ).astype(config.dtype)
    psi = PairDiscriminator(
        config.feat_dim, hidden=config.disc_hidden, layers=config.disc_layers, heads=config.disc_heads,
        seed=psi_seed, p_drop=config.p_drop,
    ).astype(config.dtype)
    if config.augmentor_init == "pretrained" and config.learn_augmentor:
        aug = pretrained_augmentor(
            (size, size), config.manual_severity, config.pretrain_pairs, config.pretrain_epochs,
            config.param_bounds, seed=config.seed,
        )
    else:
        make = AugmentorParams.default if config.augmentor_init == "default" else AugmentorParams.identity
        aug = make((size, size))
    aug = clamp_params(aug, config.param_bounds)
    if dataset is not None:
        if dataset.image_shape != (size, size, 3):
            raise DataError(f"dataset images are {dataset.image_shape}, config expects {(size, size, 3)}")
        calibrate_batchnorm(theta, backbone.encode(dataset.images.astype(config.dtype)))
    lr_a = config.lr_augmentor or config.lr
    return TrainState(
        config=config,
        backbone=backbone,
        theta=theta,
        psi=psi,
        aug=aug,
        probe=ProbePyramid(channels=config.probe_channels),
        opt_f=Adam(theta.parameters(), config.lr, config.betas, config.adam_eps),
        opt_d=Adam(psi.parameters(), config.lr, config.betas, config.adam_eps),
        opt_a=Adam(aug.learnable(), lr_a, config.betas, config.adam_eps),
        rng=np.random.default_rng(rng_seed),
    )


# ---------------------------------------------------------------------------
# phase objectives


def distort(state: TrainState, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training-time distortion as constants: the learned augmentor, or the fixed manual one."""
    cfg = state.config
    if cfg.learn_augmentor:
        return compose_augment(x, state.aug.detached(), rng).data.astype(cfg.dtype)
    return manual_augment(x, cfg.manual_profile, cfg.manual_severity, rng, fixed=True).astype(cfg.dtype)


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def discriminator_objective(state: TrainState, batch: PairBatch, rng: np.random.Generator) -> Tensor:
    """Negated pair log-likelihood; features are constants, gradients reach psi only."""
    x = batch.images.astype(state.config.dtype)
    xd = distort(state, x, rng)
    feats = state.pipeline.features(np.concatenate([x, xd])).data
    n = len(x)
    z_img = np.concatenate([feats, feats])
    z_txt = np.concatenate([batch.pos, batch.pos, batch.neg, batch.neg]).astype(state.config.dtype)
    p = state.psi(z_img, z_txt, RunContext(training=True, rng=rng))
    return loss_disc(p[:n], p[n : 2 * n], p[2 * n : 3 * n], p[3 * n :])


def augmentor_objective(state: TrainState, batch: PairBatch, rng: np.random.Generator) -> tuple[Tensor, dict]:
    """``L_inv - lambda_sem * L_sem`` (to be ascended); the extractor sits behind stop-gradients."""
    x = batch.images.astype(state.config.dtype)
    xd = compose_augment(x, state.aug, rng)
    frozen = RunContext(frozen=True)
    f = state.pipeline.features(x).data
    fd = state.theta(state.backbone.encode(xd), frozen)
    l_inv = loss_inv(fd, f)
    l_sem = loss_sem(x, xd, state.probe)
    obj = ops.sub(l_inv, ops.mul(l_sem, state.config.lambda_sem))
    return obj, {"loss_inv": l_inv.item(), "loss_sem": l_sem.item()}


def extractor_objective(
    state: TrainState, batch: PairBatch, rng: np.random.Generator, update_stats: bool = False
) -> tuple[Tensor, dict]:
    """``lambda_adv * L_adv (+ L_inv)``; distortion and discriminator are constants."""
    cfg = state.config
    x = batch.images.astype(cfg.dtype)
    xd = distort(state, x, rng)
    n = len(x)
    ctx = RunContext(training=True, rng=rng, update_stats=update_stats)
    feats = state.pipeline.features(np.concatenate([x, xd]), ctx)
    f, fd = feats[:n], feats[n:]
    pos = np.concatenate([batch.pos, batch.pos]).astype(cfg.dtype)
    p = state.psi(feats, pos, RunContext(frozen=True))
    l_adv = loss_adv(p[:n], p[n:])
    l_inv = loss_inv(fd, f)
    loss = ops.mul(l_adv, cfg.lambda_adv)
    if cfg.inv_in_extractor:
        loss = ops.add(loss, l_inv)
    parts = {
        "loss_adv": l_adv.item(),
        "loss_inv": l_inv.item(),
        "mean_cos": float(_cos_rows(f.data, fd.data).mean()),
    }
    if not cfg.learn_augmentor:
        parts["loss_sem"] = loss_sem(x, xd, state.probe).item()
    return loss, parts


# ---------------------------------------------------------------------------
# phase steps


def _grads(loss: Tensor, params: list[Tensor], phase: str, step: int) -> list[np.ndarray]:
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"non-finite loss in {phase} phase at step {step}")
    g = _phase(phase, step, backward, loss)
    return [g.get(p.id, np.zeros_like(p.data)) for p in params]


def _phase(name: str, step: int, fn, *args):
    try:
        return fn(*args)
    except NonFiniteError as exc:
        raise NonFiniteError(f"{name} phase at step {step}: {exc}") from None


def step_discriminator(state: TrainState, batch: PairBatch, rng: Optional[np.random.Generator] = None) -> float:
    loss = _phase("discriminator", state.step, discriminator_objective, state, batch, rng or state.rng)
    grads = _grads(loss, state.opt_d.params, "discriminator", state.step)
    state.opt_d.step(grads, where=f"discriminator phase at step {state.step}")
    state.step += 1
    return loss.item()


def step_augmentor(state: TrainState, batch: PairBatch, rng: Optional[np.random.Generator] = None) -> dict:
    obj, parts = _phase("augmentor", state.step, augmentor_objective, state, batch, rng or state.rng)
    grads = _grads(obj, state.opt_a.params, "augmentor", state.step)
    state.opt_a.step(grads, sign=-1.0, where=f"augmentor phase at step {state.step}")
    state.aug.assign(clamp_params(state.aug, state.config.param_bounds))
    state.step += 1
    return parts


def step_extractor(state: TrainState, batch: PairBatch, rng: Optional[np.random.Generator] = None) -> dict:
    loss, parts = _phase("extractor", state.step, extractor_objective, state, batch, rng or state.rng, True)
    grads = _grads(loss, state.opt_f.params, "extractor", state.step)
    state.opt_f.step(grads, where=f"extractor phase at step {state.step}")
    state.step += 1
    return parts


# ---------------------------------------------------------------------------
# training loop


def format_metric(v: float) -> str:
    return repr(float(v))


def write_metrics(path, rows: list[dict], config: TrainConfig) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={config.digest()} seed={config.seed}\n")
    buf.write(f"# lambda_adv={config.lambda_adv} lambda_sem={config.lambda_sem}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["round"]] + [format_metric(r[c]) for c in METRIC_COLUMNS[1:]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def train(
    state: TrainState,
    dataset: ImageDataset,
    anchors: AnchorSet,
    rounds: Optional[int] = None,
    metrics_path=None,
    checkpoint_dir=None,
    callback: Optional[Callable[[TrainState, dict], None]] = None,
) -> tuple[TrainState, list[dict]]:
    """Run ``rounds`` rounds of n_D discriminator, n_A augmentor and n_F extractor steps."""
    cfg = state.config
    rounds = cfg.rounds if rounds is None else rounds
    missing = [i for i in dataset.ids if i not in anchors.pairing]
    if missing:
        raise DataError(f"images without an anchor pairing: {missing[:5]}")
    if anchors.dim != cfg.feat_dim:
        raise DataError(f"anchor dimension {anchors.dim} does not match feature dimension {cfg.feat_dim}")
    log: list[dict] = []
    for _ in range(rounds):
        row = {"round": state.round + 1}
        for _ in range(cfg.n_d):
            row["loss_disc"] = step_discriminator(state, sample_pair_batch(anchors, dataset, cfg.batch_size, state.rng))
        if cfg.learn_augmentor:
            for _ in range(cfg.n_a):
                parts = step_augmentor(state, sample_pair_batch(anchors, dataset, cfg.batch_size, state.rng))
                row["loss_sem"] = parts["loss_sem"]
        for _ in range(cfg.n_f):
            row.update(step_extractor(state, sample_pair_batch(anchors, dataset, cfg.batch_size, state.rng)))
        state.round += 1
        log.append(row)
        if callback:
            callback(state, row)
        if checkpoint_dir and cfg.checkpoint_every and state.round % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"round{state.round:05d}.ckpt")
    if metrics_path:
        write_metrics(metrics_path, log, cfg)
    return state, log


# ---------------------------------------------------------------------------
# augmentor pretraining


def _target_fn(target):
    if callable(target):
        return target
    profile, severity = target
    return lambda x, rng: manual_augment(x, profile, severity, rng)


def pretrain_augmentor(
    module: str,
    target,
    pairs: int = 500,
    params: Optional[AugmentorParams] = None,
    bounds: ParamBounds = ParamBounds(),
    lr: float = 1e-2,
    batch_size: int = 16,
    epochs: int = 1,
    image_size: int = 32,
    seed: int = 0,
) -> tuple[AugmentorParams, dict]:
    """Fit one learnable module to a target distortion with ``mse + (1 - ssim)``.

    ``target`` is either ``(profile, severity)`` for a hand-crafted profile or a
    callable ``(x, rng) -> y``. Module and target share each step's noise draws.
    """
    if module not in MODULE_PARAMS:
        raise ConfigError(f"unknown augmentor module {module!r}; valid modules: {', '.join(COMPOSITION_ORDER)}")
    params = (params or AugmentorParams.identity((image_size, image_size))).copy()
    names = MODULE_PARAMS[module]
    opt = Adam([getattr(params, n) for n in names], lr=lr)
    fn = _target_fn(target)
    images = synthetic_dataset(max(pairs, 1), image_size, seed=seed).images
    rng = np.random.default_rng(seed)
    steps = epochs * math.ceil(pairs / batch_size) if pairs > 0 else 0
    history = []
    for step in range(steps):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x = images[idx]
        noise_seed = int(rng.integers(2**63))
        y = np.asarray(fn(x, np.random.default_rng(noise_seed)))
        out = compose_augment(x, params, np.random.default_rng(noise_seed), enabled=[module])
        l_mse = mse(out, y)
        l_ssim = ssim(out, y)
        loss = ops.add(l_mse, ops.sub(1.0, l_ssim))
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"pretraining diverged at step {step}")
        g = backward(loss)
        opt.step([g.get(getattr(params, n).id, np.zeros_like(getattr(params, n).data)) for n in names],
                 where=f"pretraining step {step}")
        params.assign(clamp_params(params, bounds))
        history.append((l_mse.item(), l_ssim.item()))
    report = {
        "module": module,
        "steps": steps,
        "final_mse": history[-1][0] if history else None,
        "final_ssim": history[-1][1] if history else None,
        "history": history,
    }
    return params, report


def pretrained_augmentor(
    size: tuple[int, int],
    severity: float,
    pairs: int = 500,
    epochs: int = 3,
    bounds: ParamBounds = ParamBounds(),
    seed: int = 0,
) -> AugmentorParams:
    """Fit every module to the fixed hand-crafted version of its distortion.

    The Moire phase is pinned to the target's during fitting (a random phase
    would average the fitted amplitude towards zero) and released afterwards.
    """
    base = AugmentorParams.default(size)
    params = replace(base, moire_phase_range=(0.0, 0.0))
    for i, module in enumerate(COMPOSITION_ORDER):
        profile = MODULE_TARGETS[module]

        def target(x, rng, profile=profile):
            return manual_augment(x, profile, severity, rng, fixed=True)

        params, _ = pretrain_augmentor(
            module, target, pairs, params=params, bounds=bounds, epochs=epochs,
            image_size=size[0], seed=seed * 7919 + i,
        )
    return replace(params, moire_phase_range=base.moire_phase_range)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TICK"
CKPT_VERSION = 1


def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _npz_load(blob: bytes) -> dict[str, np.ndarray]:
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in d.items()}


def save_checkpoint(state: TrainState, path) -> None:
    """Framed binary: magic, version, then (name, length, payload) sections."""
    sections = {
        "config": json.dumps(state.config.to_dict(), sort_keys=True).encode(),
        "config_hash": state.config.digest().encode(),
        "theta": _npz_bytes(state.theta.state_dict()),
        "psi": _npz_bytes(state.psi.state_dict()),
        "augmentor": _npz_bytes(state.aug.state_dict()),
        "optimizers": _npz_bytes({
            **_prefixed("f/", state.opt_f.state_dict()),
            **_prefixed("d/", state.opt_d.state_dict()),
            **_prefixed("a/", state.opt_a.state_dict()),
        }),
        "rng": json.dumps(state.rng.bit_generator.state).encode(),
        "counters": json.dumps({"round": state.round, "step": state.step}).encode(),
    }
    out = bytearray(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(sections)))
    for name, payload in sections.items():
        key = name.encode()
        out += struct.pack("<I", len(key)) + key + struct.pack("<Q", len(payload)) + payload
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def read_sections(path) -> dict[str, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic at byte 0)")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos, sections = 12, {}
    for _ in range(count):
        start = pos
        try:
            (klen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + klen].decode()
            (plen,) = struct.unpack_from("<Q", raw, pos + 4 + klen)
        except (struct.error, UnicodeDecodeError):
            raise DataError(f"{path}: malformed section header at byte {start}") from None
        pos += 4 + klen + 8
        if pos + plen > len(raw):
            raise DataError(f"{path}: truncated section {name!r} at byte {start}")
        sections[name] = raw[pos : pos + plen]
        pos += plen
    return sections


def load_checkpoint(path, dataset: Optional[ImageDataset] = None) -> TrainState:
    sec = read_sections(path)
    config = TrainConfig.from_dict(json.loads(sec["config"]))
    if config.digest() != sec["config_hash"].decode():
        raise DataError(f"{path}: config hash mismatch")
    state = init_state(config)
    state.theta.load_state_dict(_npz_load(sec["theta"]))
    state.psi.load_state_dict(_npz_load(sec["psi"]))
    state.aug.assign(AugmentorParams.from_state_dict(_npz_load(sec["augmentor"])))
    opts = _npz_load(sec["optimizers"])
    for key, opt in (("f/", state.opt_f), ("d/", state.opt_d), ("a/", state.opt_a)):
        opt.load_state_dict({k[len(key):]: v for k, v in opts.items() if k.startswith(key)})
    state.rng.bit_generator.state = json.loads(sec["rng"])
    counters = json.loads(sec["counters"])
    state.round, state.step = counters["round"], counters["step"]
    return state


def checkpoint_pipeline(path) -> Pipeline:
    """Backbone and extractor of a checkpoint, for evaluation and watermarking."""
    return load_checkpoint(path).pipeline
