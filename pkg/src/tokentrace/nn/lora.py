"""Low-rank adaptation over the transformer's linear projections.

The base weights are frozen (requires_grad off, never touched by the
optimizer); each targeted projection W gains factors A (d_in x r, small
random) and B (r x d_out, zeros) applied as W + (alpha/r) * A @ B. Zero
initialization of B makes the adapted model exactly equal to the base
model before the first step.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import StateError
from .tensor import Tensor, parameter
from .transformer import Adapter, LAYER_MATRICES, Transformer

DEFAULT_TARGETS = ("wq", "wv")
_VALID_TARGETS = LAYER_MATRICES + ("head",)


class LoraModel:
    """A frozen base transformer plus trainable adapter factors."""

    def __init__(self, base: Transformer, rank: int, alpha: float):
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.merged = False

    def forward(self, tokens) -> Tensor:
        return self.base.forward(tokens)

    def trainable_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, ad in self.base.adapters.items():
            out[f"{name}.lora_a"] = ad.a
            out[f"{name}.lora_b"] = ad.b
        return out

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.trainable_parameters().values())

    def zero_grad(self) -> None:
        for t in self.trainable_parameters().values():
            t.zero_grad()

    def adapter_state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.trainable_parameters().items()}

    def load_adapter_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.trainable_parameters()
        if set(state) != set(params):
            raise ValueError("adapter state names do not match the attached adapters")
        for name, arr in state.items():
            if tuple(arr.shape) != params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}")
            params[name].data = np.asarray(arr, dtype=params[name].data.dtype)


def attach_lora(
    base: Transformer,
    targets: tuple[str, ...] = DEFAULT_TARGETS,
    rank: int = 16,
    alpha: float = 16.0,
    seed: int = 0,
    init_scale: float = 0.01,
) -> LoraModel:
    """Freeze the base and allocate adapters on the targeted projections.

    Targets name projection kinds ("wq", "wv", ..., "head"); every layer's
    instance of a targeted kind gets its own factor pair.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    for t in targets:
        if t not in _VALID_TARGETS:
            raise ValueError(f"unknown adapter target {t!r}; valid: {_VALID_TARGETS}")
    if base.adapters:
        raise StateError("base model already has adapters attached")

    names = []
    for name in base.params:
        kind = name.split(".")[-1]
        if kind in targets:
            names.append(name)
    if not names:
        raise ValueError(f"no parameters match targets {targets}")

    rng = np.random.default_rng(seed)
    scale = alpha / rank
    for name in sorted(names):
        w = base.params[name].data
        if w.ndim != 2:
            raise ValueError(f"adapter target {name} is not a matrix")
        d_in, d_out = w.shape
        if rank > min(d_in, d_out):
            raise ValueError(
                f"rank {rank} exceeds min dimension {min(d_in, d_out)} of {name}"
            )
        a = parameter(rng.normal(0.0, init_scale, size=(d_in, rank)).astype(w.dtype))
        b = parameter(np.zeros((rank, d_out), dtype=w.dtype))
        base.adapters[name] = Adapter(a=a, b=b, scale=scale)

    base.set_trainable(False)
    return LoraModel(base=base, rank=rank, alpha=alpha)


def merge_lora(model: LoraModel) -> Transformer:
    """Materialize W + (alpha/r) * A @ B into a dense adapter-free model."""
    if model.merged:
        raise StateError("adapters already merged into the base weights")
    base = model.base
    merged = Transformer(base.config, seed=0, dtype=base.dtype)
    state = base.state_dict()
    for name, ad in base.adapters.items():
        state[name] = state[name] + ad.scale * (ad.a.data @ ad.b.data)
    merged.load_state_dict(state)
    merged.set_trainable(False)
    model.merged = True
    return merged


def params_hash(arrays: dict[str, np.ndarray]) -> str:
    """Order-independent content hash for freeze checks."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        arr = np.ascontiguousarray(arrays[name])
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
