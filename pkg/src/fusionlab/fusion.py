"""Feature-fusion heads over frozen-encoder taps.

Three families:

* single-layer pass-through (the per-layer probing baseline),
* linear fusion: concatenate taps, then a 1-to-4 layer MLP projector,
* hierarchical fusion: per-tap 1-layer projectors ("FP") whose outputs
  are combined either pairwise (balanced) or through two bottom-to-middle
  and top-to-middle chains (unbalanced), then a 3-layer concat-and-project
  stack.

Tap order is semantic everywhere: features are concatenated in ascending
layer order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Linear
from .params import Module
from .tensor import Tensor, scope

__all__ = [
    "LinearFusionSpec",
    "HierarchicalFusionSpec",
    "LinearFusionHead",
    "HierarchicalFusionHead",
    "single_layer_head",
    "build_fusion_head",
    "evenly_spaced_taps",
    "layer_weight_norms",
]


def evenly_spaced_taps(num_layers: int, count: int) -> tuple[int, ...]:
    """Evenly spaced tap indices spanning the stack, top layer included.

    Spacing walks down from the top in steps of num_layers / count with
    round-half-up, e.g. 12 of 24 gives every odd layer, 4 of 24 gives
    (5, 11, 17, 23).
    """
    if not 1 <= count <= num_layers:
        raise ValueError(f"cannot pick {count} taps from {num_layers} layers")
    picks = [num_layers - 1 - int(j * num_layers / count + 0.5) for j in range(count)]
    taps = tuple(sorted(picks))
    if len(set(taps)) != count or taps[0] < 0:
        raise ValueError(f"degenerate tap spacing for {count} of {num_layers}")
    return taps


@dataclass(frozen=True)
class LinearFusionSpec:
    tap_indices: tuple[int, ...]
    depth: int = 1
    width: int = 64  # hidden and output width of the projector

    def validate(self, num_layers: int) -> None:
        _check_taps(self.tap_indices, num_layers, minimum=1)
        if not 1 <= self.depth <= 4:
            raise ValueError(f"projector depth must be in [1, 4], got {self.depth}")
        if self.width <= 0:
            raise ValueError(f"projector width must be positive, got {self.width}")

    @property
    def output_dim(self) -> int:
        return self.width


@dataclass(frozen=True)
class HierarchicalFusionSpec:
    tap_indices: tuple[int, ...]
    variant: str = "balanced"  # or "unbalanced"
    fp_dim: int = 32  # per-tap projector output width, model_dim/2 by default
    final_dim: int = 64
    final_depth: int = 3

    def validate(self, num_layers: int) -> None:
        if self.variant not in ("balanced", "unbalanced"):
            raise ValueError(f"unknown hierarchical fusion variant {self.variant!r}")
        minimum = 2 if self.variant == "balanced" else 3
        _check_taps(self.tap_indices, num_layers, minimum)
        if self.fp_dim <= 0 or self.final_dim <= 0:
            raise ValueError("fp_dim and final_dim must be positive")
        if self.final_depth < 1:
            raise ValueError(f"final_depth must be at least 1, got {self.final_depth}")

    @property
    def output_dim(self) -> int:
        return self.final_dim


def _check_taps(taps, num_layers: int, minimum: int) -> None:
    taps = tuple(taps)
    if len(taps) < minimum:
        hint = "; use a single-layer head instead" if minimum == 2 else ""
        raise ValueError(f"need at least {minimum} taps, got {len(taps)}{hint}")
    if list(taps) != sorted(set(taps)):
        raise ValueError(f"tap indices must be strictly increasing, got {taps}")
    if taps[0] < 0 or taps[-1] >= num_layers:
        raise ValueError(f"tap indices {taps} out of range for {num_layers} layers")


def single_layer_head(taps, index: int) -> Tensor:
    """Identity pass-through of one tap; downstream layers do the learning."""
    if index not in taps:
        raise KeyError(f"tap {index} was not captured; available: {taps.indices}")
    return taps[index]


class LinearFusionHead(Module):
    def __init__(self, spec: LinearFusionSpec, model_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        spec.validate(num_layers=(spec.tap_indices[-1] + 1) if spec.tap_indices else 1)
        self.spec = spec
        self.model_dim = model_dim
        n = len(spec.tap_indices)
        self.layers: list[Linear] = []
        d_in = n * model_dim
        for i in range(spec.depth):
            layer = Linear(d_in, spec.width, rng, dtype)
            self.layers.append(self.child(f"proj_{i}", layer))
            d_in = spec.width

    def __call__(self, taps) -> Tensor:
        feats = [taps[i] for i in self.spec.tap_indices]
        with scope("fusion"):
            h = ops.concat(feats, axis=-1)
            for i, layer in enumerate(self.layers):
                if i:
                    h = ops.relu(h)
                h = layer(h)
        return h

    def first_layer_weight(self) -> np.ndarray:
        return self.layers[0].w.value.data


class HierarchicalFusionHead(Module):
    def __init__(self, spec: HierarchicalFusionSpec, model_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        spec.validate(num_layers=(spec.tap_indices[-1] + 1) if spec.tap_indices else 1)
        self.spec = spec
        self.model_dim = model_dim
        n = len(spec.tap_indices)
        if spec.variant == "balanced":
            self.fps = [
                self.child(f"fp_{i}", Linear(model_dim, spec.fp_dim, rng, dtype))
                for i in range(n)
            ]
            concat_dim = n * spec.fp_dim
        else:
            split = (n + 1) // 2
            self.bottom = _Chain(model_dim, spec.fp_dim, split, rng, dtype)
            self.top = _Chain(model_dim, spec.fp_dim, n - split, rng, dtype)
            self.child("bottom", self.bottom)
            self.child("top", self.top)
            self.split = split
            concat_dim = 2 * spec.fp_dim
        self.final_layers: list[Linear] = []
        d_in = concat_dim
        for i in range(spec.final_depth):
            layer = Linear(d_in, spec.final_dim, rng, dtype)
            self.final_layers.append(self.child(f"cp_{i}", layer))
            d_in = spec.final_dim

    def _concat_project(self, h: Tensor) -> Tensor:
        for i, layer in enumerate(self.final_layers):
            if i:
                h = ops.relu(h)
            h = layer(h)
        return h

    def __call__(self, taps) -> Tensor:
        feats = [taps[i] for i in self.spec.tap_indices]
        with scope("fusion"):
            if self.spec.variant == "balanced":
                projected = [fp(f) for fp, f in zip(self.fps, feats)]
                pairs = []
                for i in range(0, len(projected), 2):
                    pair = projected[i : i + 2]
                    pairs.append(ops.concat(pair, axis=-1) if len(pair) == 2 else pair[0])
                h = ops.concat(pairs, axis=-1) if len(pairs) > 1 else pairs[0]
            else:
                bottom = self.bottom(feats[: self.split])
                top = self.top(list(reversed(feats[self.split :])))
                h = ops.concat([bottom, top], axis=-1)
            return self._concat_project(h)


class _Chain(Module):
    """Sequential project-and-concatenate chain: state starts as FP(first
    tap) and each step folds in the next tap via a fresh projector."""

    def __init__(self, model_dim: int, fp_dim: int, length: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if length < 1:
            raise ValueError("chain needs at least one tap")
        self.first = self.child("fp_0", Linear(model_dim, fp_dim, rng, dtype))
        self.steps = [
            self.child(f"fp_{j}", Linear(fp_dim + model_dim, fp_dim, rng, dtype))
            for j in range(1, length)
        ]

    def __call__(self, feats: list[Tensor]) -> Tensor:
        state = self.first(feats[0])
        for step, feat in zip(self.steps, feats[1:]):
            state = step(ops.concat([state, feat], axis=-1))
        return state


def build_fusion_head(spec, model_dim: int, seed: int, dtype=np.float32) -> Module:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if isinstance(spec, LinearFusionSpec):
        return LinearFusionHead(spec, model_dim, rng, dtype)
    if isinstance(spec, HierarchicalFusionSpec):
        return HierarchicalFusionHead(spec, model_dim, rng, dtype)
    raise TypeError(f"not a fusion spec: {spec!r}")


def layer_weight_norms(head) -> list[tuple[int, float]]:
    """Per-tap l2 norm of the first projector layer's weight slabs.

    Row block i of the (n * model_dim, width) weight matrix corresponds to
    tap i; its Frobenius norm measures how much that layer contributes.
    """
    if not isinstance(head, LinearFusionHead):
        raise TypeError("weight-norm analysis applies to linear fusion heads only")
    w = head.first_layer_weight()
    d = head.model_dim
    out = []
    for slot, tap in enumerate(head.spec.tap_indices):
        slab = w[slot * d : (slot + 1) * d, :]
        out.append((tap, float(np.sqrt((slab.astype(np.float64) ** 2).sum()))))
    return out
