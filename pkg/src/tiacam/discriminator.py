"""Transformer pair discriminator over ``[CLS, W z_img, W z_txt]``."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import ConfigError, ShapeError
from .nn import EVAL, LayerNorm, Linear, Module, RunContext, dropout


class SelfAttention(Module):
    def __init__(self, hidden: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if hidden % heads:
            raise ConfigError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(hidden, hidden, rng)
        self.k = Linear(hidden, hidden, rng)
        self.v = Linear(hidden, hidden, rng)
        self.o = Linear(hidden, hidden, rng)

    def _split(self, t: Tensor) -> Tensor:
        n, s, h = t.shape
        return ops.transpose(ops.reshape(t, (n, s, self.heads, h // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, ctx: RunContext = EVAL) -> tuple[Tensor, Tensor]:
        n, s, h = x.shape
        q, k, v = (self._split(layer(x, ctx)) for layer in (self.q, self.k, self.v))
        scores = ops.div(ops.matmul(q, ops.swapaxes(k, -1, -2)), math.sqrt(h // self.heads))
        attn = ops.softmax(scores, axis=-1)
        mixed = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (n, s, h))
        return self.o(mixed, ctx), attn


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(LN(x))`` then ``x + MLP(LN(x))`` with GELU."""

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator, p_drop: float = 0.1, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads, rng)
        self.ln2 = LayerNorm(hidden)
        self.fc1 = Linear(hidden, hidden * mlp_ratio, rng)
        self.fc2 = Linear(hidden * mlp_ratio, hidden, rng)
        self.p_drop = p_drop

    def __call__(self, x: Tensor, ctx: RunContext = EVAL) -> tuple[Tensor, Tensor]:
        a, weights = self.attn(self.ln1(x, ctx), ctx)
        x = ops.add(x, dropout(a, self.p_drop, ctx))
        m = self.fc2(dropout(ops.gelu(self.fc1(self.ln2(x, ctx), ctx)), self.p_drop, ctx), ctx)
        return ops.add(x, dropout(m, self.p_drop, ctx)), weights


class PairDiscriminator(Module):
    """Classifies (image feature, text feature) pairs as matched (real) or not.

    Both features go through one shared projection. ``slot_embeddings`` adds a
    learned vector per slot so the image and text positions are
    distinguishable; without it the CLS output is exactly symmetric under
    swapping the two inputs.
    """

    def __init__(
        self,
        feat_dim: int,
        hidden: int = 64,
        layers: int = 2,
        heads: int = 2,
        seed: int = 0,
        p_drop: float = 0.1,
        head_scale: float = 0.01,
        slot_embeddings: bool = True,
    ):
        super().__init__()
        if hidden % heads:
            raise ConfigError(f"hidden size {hidden} is not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.heads = heads
        self.p_drop = p_drop
        self.proj = Linear(feat_dim, hidden, rng)
        self.cls = Tensor(rng.normal(scale=0.02, size=(1, 1, hidden)), requires_grad=True)
        self.slots = (
            Tensor(rng.normal(scale=0.02, size=(1, 2, hidden)), requires_grad=True) if slot_embeddings else None
        )
        self.blocks = [TransformerBlock(hidden, heads, rng, p_drop) for _ in range(layers)]
        self.ln_f = LayerNorm(hidden)
        self.head = Linear(hidden, 2, rng)
        self.head.weight.data *= head_scale / max(abs(self.head.weight.data).max(), 1e-12)
        self.head.bias.data[:] = 0.0

    def logits(self, z_img, z_txt, ctx: RunContext = EVAL, return_attention: bool = False):
        z_img, z_txt = as_tensor(z_img), as_tensor(z_txt)
        if z_img.shape != z_txt.shape:
            raise ShapeError(f"discriminator inputs differ in shape: {z_img.shape} vs {z_txt.shape}")
        if z_img.shape[-1] != self.feat_dim:
            raise ShapeError(f"discriminator expects {self.feat_dim}-D features, got {z_img.shape}")
        single = z_img.ndim == 1
        if single:
            z_img, z_txt = ops.reshape(z_img, (1, -1)), ops.reshape(z_txt, (1, -1))
        n = z_img.shape[0]
        pair = ops.stack([self.proj(z_img, ctx), self.proj(z_txt, ctx)], axis=1)  # (N, 2, hidden)
        if self.slots is not None:
            pair = ops.add(pair, self.use(self.slots, ctx))
        cls = ops.broadcast_to(self.use(self.cls, ctx), (n, 1, self.hidden))
        x = ops.concat([cls, pair], axis=1)
        attn = []
        for block in self.blocks:
            x, a = block(x, ctx)
            attn.append(a)
        x = self.ln_f(x, ctx)
        out = self.head(x[:, 0, :], ctx)
        if single:
            out = ops.reshape(out, (2,))
        return (out, attn) if return_attention else out

    def __call__(self, z_img, z_txt, ctx: RunContext = EVAL) -> Tensor:
        """Probability that the pair is matched (softmax class 1)."""
        probs = ops.softmax(self.logits(z_img, z_txt, ctx), axis=-1)
        return probs[..., 1]

    def config(self) -> dict:
        return {
            "feat_dim": self.feat_dim, "hidden": self.hidden, "layers": len(self.blocks),
            "heads": self.heads, "p_drop": self.p_drop, "slot_embeddings": self.slots is not None,
        }


def discriminate(psi: PairDiscriminator, z_img, z_txt, mode: str = "eval", rng=None) -> Tensor:
    return psi(z_img, z_txt, RunContext(training=mode == "train", rng=rng))
