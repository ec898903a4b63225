"""Decoder-only causal transformer built on the tape autograd core.

Pre-norm blocks with learned positional embeddings. Causality comes from
filling future attention scores with -inf before the softmax, which zeroes
them exactly, so logits at position c are bit-for-bit independent of any
later token. Linear projections consult an adapter table, which is how the
low-rank adaptation layer hooks in without touching the frozen weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    embedding,
    mask_keep,
    matmul,
    parameter,
    power,
    softmax,
    tanh,
)


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 2048
    max_positions: int = 4096

    def __post_init__(self):
        for name in (
            "n_layers",
            "n_heads",
            "d_model",
            "d_ff",
            "vocab_size",
            "max_positions",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
        }


@dataclass
class Adapter:
    """Low-rank factors applied additively to one projection."""

    a: Tensor  # (d_in, r)
    b: Tensor  # (r, d_out)
    scale: float


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5) * g + b


def gelu(x: Tensor) -> Tensor:
    inner = 0.7978845608028654 * (x + 0.044715 * power(x, 3))
    return 0.5 * x * (1.0 + tanh(inner))


# projection parameter names per layer; these are the legal adapter targets
LAYER_MATRICES = ("wq", "wk", "wv", "wo", "w1", "w2")


class Transformer:
    """Parameters live in a flat name -> Tensor dict; forward is pure."""

    def __init__(
        self,
        config: TransformerConfig,
        seed: int = 0,
        dtype=np.float32,
        init_scale: float = 0.02,
    ):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config

        def w(*shape):
            return parameter(
                rng.normal(0.0, init_scale, size=shape).astype(self.dtype)
            )

        params: dict[str, Tensor] = {
            "tok_emb": w(c.vocab_size, c.d_model),
            "pos_emb": w(c.max_positions, c.d_model),
        }
        for i in range(c.n_layers):
            p = f"layer{i}."
            params[p + "ln1_g"] = parameter(np.ones(c.d_model, dtype=self.dtype))
            params[p + "ln1_b"] = parameter(np.zeros(c.d_model, dtype=self.dtype))
            params[p + "wq"] = w(c.d_model, c.d_model)
            params[p + "wk"] = w(c.d_model, c.d_model)
            params[p + "wv"] = w(c.d_model, c.d_model)
            params[p + "wo"] = w(c.d_model, c.d_model)
            params[p + "ln2_g"] = parameter(np.ones(c.d_model, dtype=self.dtype))
            params[p + "ln2_b"] = parameter(np.zeros(c.d_model, dtype=self.dtype))
            params[p + "w1"] = w(c.d_model, c.d_ff)
            params[p + "b1"] = parameter(np.zeros(c.d_ff, dtype=self.dtype))
            params[p + "w2"] = w(c.d_ff, c.d_model)
            params[p + "b2"] = parameter(np.zeros(c.d_model, dtype=self.dtype))
        params["ln_f_g"] = parameter(np.ones(c.d_model, dtype=self.dtype))
        params["ln_f_b"] = parameter(np.zeros(c.d_model, dtype=self.dtype))
        params["head"] = w(c.d_model, c.vocab_size)
        self.params = params
        self.adapters: dict[str, Adapter] = {}

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def _proj(self, x: Tensor, name: str) -> Tensor:
        y = matmul(x, self.params[name])
        ad = self.adapters.get(name)
        if ad is not None:
            y = y + matmul(matmul(x, ad.a), ad.b) * ad.scale
        return y

    def forward(self, tokens) -> Tensor:
        """Logits for every position: (T, V), or (B, T, V) for batched ids."""
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ValueError(f"tokens must be 1-d or 2-d, got shape {ids.shape}")
        B, T = ids.shape
        c = self.config
        if T > c.max_positions:
            raise ValueError(f"sequence length {T} exceeds max_positions {c.max_positions}")
        if T == 0:
            raise ValueError("empty token sequence")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise ValueError(f"token ids outside [0, {c.vocab_size})")

        x = embedding(self.params["tok_emb"], ids) + embedding(
            self.params["pos_emb"], np.arange(T)
        )
        d_head = c.d_model // c.n_heads
        causal = np.tril(np.ones((T, T), dtype=bool))
        for i in range(c.n_layers):
            p = f"layer{i}."
            h = layer_norm(x, self.params[p + "ln1_g"], self.params[p + "ln1_b"])

            def heads(t: Tensor) -> Tensor:
                return t.reshape((B, T, c.n_heads, d_head)).transpose((0, 2, 1, 3))

            q = heads(self._proj(h, p + "wq"))
            k = heads(self._proj(h, p + "wk"))
            v = heads(self._proj(h, p + "wv"))
            scores = matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(d_head))
            scores = mask_keep(scores, causal, -np.inf)
            attn = softmax(scores, axis=-1)
            ctx = matmul(attn, v).transpose((0, 2, 1, 3)).reshape((B, T, c.d_model))
            x = x + self._proj(ctx, p + "wo")

            h = layer_norm(x, self.params[p + "ln2_g"], self.params[p + "ln2_b"])
            y = gelu(self._proj(h, p + "w1") + self.params[p + "b1"])
            x = x + self._proj(y, p + "w2") + self.params[p + "b2"]

        x = layer_norm(x, self.params["ln_f_g"], self.params["ln_f_b"])
        logits = self._proj(x, "head")
        if single:
            logits = logits.reshape((T, c.vocab_size))
        return logits

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in state.items():
            if tuple(arr.shape) != self.params[name].data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs "
                    f"{self.params[name].data.shape}"
                )
            self.params[name].data = np.asarray(arr, dtype=self.dtype)
