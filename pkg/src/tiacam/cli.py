"""Command-line entry point (``tiacam <subcommand>``).

Exit codes: 0 success, 2 configuration error, 3 convergence error, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import PROFILES, ParamBounds, compose_augment, render
from .data import dump_dataset, ingest, read_image, resize, synthetic_dataset, tree_digest, write_image
from .errors import ConfigError, ConvergenceError, DataError, TiacamError
from .evaluation import (
    HELD_OUT,
    eval_ablation_augmentor,
    eval_bits,
    eval_invariance,
    linear_probe,
    probe_report,
    svg_bar_chart,
)
from .features import AnchorSet
from .trainer import (
    MODULE_PARAMS,
    MODULE_TARGETS,
    TrainConfig,
    init_state,
    load_checkpoint,
    pretrain_augmentor,
    save_checkpoint,
    train,
)
from .watermark import (
    extract,
    format_bits,
    parse_bits,
    read_signature,
    register,
    write_signature,
)


def _global_options() -> argparse.ArgumentParser:
    # accepted before or after the subcommand; SUPPRESS keeps a later default
    # from overwriting an earlier explicit value
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON training/evaluation config")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (u64)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory (signature file for register)")
    p.add_argument("--precision", choices=("f32", "f64"), default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = argparse.ArgumentParser(prog="tiacam", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_)

    p = add("gen-synthetic", "write a synthetic shapes dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)

    p = add("ingest", "validate a dataset directory and summarise it")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default="manifest.json")
    p.add_argument("--size", type=int, default=None)

    p = add("train", "adversarial three-phase training")
    p.add_argument("--data", required=True)
    p.add_argument("--rounds", type=int, default=None)

    p = add("pretrain-augmentor", "fit one augmentor module to a hand-crafted distortion")
    p.add_argument("--module", required=True, choices=sorted(MODULE_PARAMS))
    p.add_argument("--profile", default=None, help="target profile (default: the module's own)")
    p.add_argument("--severity", type=float, default=0.5)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--epochs", type=int, default=1)

    p = add("dump-augmented", "write learned-augmentor outputs as PPM images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=8)

    p = add("register", "register a message against an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--bits", required=True, help="hex digits or random:k")
    p.add_argument("--dim", type=int, default=64, help="code dimension d")

    p = add("extract", "recover a message from an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--sig", required=True)

    for name, help_ in (("eval-invariance", "feature cosine under distortions"),
                        ("eval-bits", "bit accuracy under distortions"),
                        ("probe", "linear probe on frozen features")):
        p = add(name, help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--severity", type=float, default=1.0)
        if name == "eval-invariance":
            p.add_argument("--profiles", default=",".join(PROFILES))
            p.add_argument("--svg", action="store_true")
        if name == "eval-bits":
            p.add_argument("--profiles", default="all")
            p.add_argument("--k", default="30", help="comma-separated message lengths")
        if name == "probe":
            p.add_argument("--epochs", type=int, default=300)
            p.add_argument("--profile", default="all")

    p = add("eval-ablation", "learned versus manual augmentor checkpoints")
    p.add_argument("--learned", required=True)
    p.add_argument("--manual", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--severity", type=float, default=1.0)
    p.add_argument("--k", default="30")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> TrainConfig:
    d: dict = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "precision", None):
        d["precision"] = args.precision
    return TrainConfig.from_dict(d)


def _out(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: Optional[TrainConfig] = None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return cfg.seed if cfg else 0


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _load_image(path: str, size: int) -> np.ndarray:
    return resize(read_image(path), size)


def _dataset(args, size: int):
    return ingest(args.data, size=size)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> int:
    ds = synthetic_dataset(args.n, args.size, args.classes, seed=_seed(args))
    path = dump_dataset(ds, _out(args))
    print(f"wrote {len(ds)} images to {path.parent}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _config(args)
    ds = ingest(args.data, args.manifest, size=args.size or cfg.image_size)
    summary = {
        "images": len(ds), "classes": len(ds.class_names), "image_shape": list(ds.image_shape),
        "anchors": len(set(ds.pairing.values())), "bundle": bool(ds.bundle), "digest": tree_digest(args.data),
    }
    (_out(args) / "ingest.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    ds = _dataset(args, cfg.image_size)
    anchors = AnchorSet.for_dataset(ds, cfg.feat_dim, seed=cfg.anchor_seed)
    state = init_state(cfg, ds)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    state, log = train(state, ds, anchors, rounds=args.rounds, metrics_path=out / "metrics.csv", checkpoint_dir=out)
    save_checkpoint(state, out / "final.ckpt")
    last = log[-1] if log else {}
    print(f"trained {state.round} rounds; metrics in {out / 'metrics.csv'}; checkpoint {out / 'final.ckpt'}")
    if last:
        print("last round: " + ", ".join(f"{k}={v:.4f}" for k, v in last.items() if k != "round"))
    return 0


def cmd_pretrain_augmentor(args) -> int:
    cfg = _config(args)
    profile = args.profile or MODULE_TARGETS[args.module]
    params, report = pretrain_augmentor(
        args.module, (profile, args.severity), args.pairs, bounds=ParamBounds.from_dict(cfg.bounds),
        epochs=args.epochs, image_size=cfg.image_size, seed=_seed(args, cfg),
    )
    out = _out(args)
    (out / "augmentor.json").write_text(json.dumps(params.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    summary = {k: v for k, v in report.items() if k != "history"}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_dump_augmented(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = _dataset(args, state.config.image_size)
    rng = np.random.default_rng(_seed(args, state.config))
    out = _out(args)
    n = min(args.n, len(ds))
    imgs = compose_augment(ds.images[:n], state.aug.detached(), rng).data
    for image_id, img in zip(ds.ids[:n], imgs):
        write_image(out / f"{image_id}_aug.ppm", render(img))
    print(f"wrote {n} augmented images to {out}")
    return 0


def cmd_register(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = state.config
    seed = _seed(args, cfg)
    bits = parse_bits(args.bits, np.random.default_rng(seed))
    pipe = state.pipeline
    feat = pipe.features(_load_image(args.image, cfg.image_size)).data
    sig = register(feat, bits, d=args.dim, lambda_c=cfg.lambda_c, seed=seed,
                   image_id=Path(args.image).name, checkpoint=pipe.digest())
    target = Path(getattr(args, "out", None) or "sig.tiwm")
    if target.is_dir():
        target = target / "sig.tiwm"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_signature(target, sig)
    print(f"bits {format_bits(bits)}")
    print(f"signature {target} (k={sig.k}, d={sig.d}, steps={sig.metadata['steps']})")
    return 0


def cmd_extract(args) -> int:
    state = load_checkpoint(args.ckpt)
    sig = read_signature(args.sig)
    img = _load_image(args.image, state.config.image_size)
    bits, probs = extract(sig, img, state.pipeline)
    print(f"bits {format_bits(bits)}")
    print("confidence " + " ".join(f"{max(p, 1 - p):.4f}" for p in probs))
    return 0


def cmd_eval_invariance(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = _dataset(args, state.config.image_size)
    rep = eval_invariance(ds, state.pipeline, _csv_list(args.profiles), args.n, _seed(args, state.config),
                          args.severity, config_hash=state.config.digest())
    out = _out(args)
    rep.write(out / "invariance.csv")
    if args.svg:
        (out / "invariance.svg").write_text(svg_bar_chart(rep, "profile", ["mean_cos"], "mean cosine"), encoding="utf-8")
    print(rep.to_csv(), end="")
    return 0


def cmd_eval_bits(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = _dataset(args, state.config.image_size)
    rep = eval_bits(ds, state.pipeline, _ints(args.k), _csv_list(args.profiles), args.n,
                    _seed(args, state.config), args.severity, lambda_c=state.config.lambda_c,
                    config_hash=state.config.digest())
    rep.write(_out(args) / "bits.csv")
    print(rep.to_csv(), end="")
    failures = max((r["failures"] for r in rep.rows), default=0)
    if failures:
        print(f"warning: {failures} registration(s) did not converge", file=sys.stderr)
    return 0


def cmd_eval_ablation(args) -> int:
    a, b = load_checkpoint(args.learned), load_checkpoint(args.manual)
    ds = _dataset(args, a.config.image_size)
    rep = eval_ablation_augmentor(ds, a.pipeline, b.pipeline, a.config, b.config, HELD_OUT, args.n,
                                  _seed(args, a.config), args.severity, _ints(args.k))
    out = _out(args)
    rep.write(out / "ablation.csv")
    print(rep.to_csv(), end="")
    return 0


def cmd_probe(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = _dataset(args, state.config.image_size)
    seed = _seed(args, state.config)
    result = linear_probe(ds, state.pipeline, epochs=args.epochs, seed=seed, profile=args.profile,
                          severity=args.severity)
    rep = probe_report(result, state.config.digest(), seed)
    rep.write(_out(args) / "probe.csv")
    print(rep.to_csv(), end="")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "pretrain-augmentor": cmd_pretrain_augmentor,
    "dump-augmented": cmd_dump_augmented,
    "register": cmd_register,
    "extract": cmd_extract,
    "eval-invariance": cmd_eval_invariance,
    "eval-bits": cmd_eval_bits,
    "eval-ablation": cmd_eval_ablation,
    "probe": cmd_probe,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ConvergenceError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except TiacamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
