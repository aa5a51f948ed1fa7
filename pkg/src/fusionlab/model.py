"""Composed frame-classification models.

A downstream model is the (usually frozen) encoder, an optional fusion
head over its taps, and a per-frame affine classifier.  The probe bank
trains one independent classifier per tap on a shared encoder forward,
which is how per-layer feature quality is measured cheaply.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .encoder import Encoder
from .fusion import (
    HierarchicalFusionHead,
    HierarchicalFusionSpec,
    LinearFusionHead,
    LinearFusionSpec,
)
from .layers import Linear
from .params import Module
from .tensor import ShapeError, Tensor, no_grad, scope

__all__ = ["DownstreamModel", "ProbeBank", "head_output_dim", "build_model"]


def head_output_dim(fusion_spec, model_dim: int) -> int:
    """Feature width the classifier sees for a given head choice."""
    if fusion_spec is None:
        return model_dim
    return fusion_spec.output_dim


def _build_head(fusion_spec, model_dim: int, rng, dtype):
    if isinstance(fusion_spec, LinearFusionSpec):
        return LinearFusionHead(fusion_spec, model_dim, rng, dtype)
    if isinstance(fusion_spec, HierarchicalFusionSpec):
        return HierarchicalFusionHead(fusion_spec, model_dim, rng, dtype)
    raise TypeError(f"not a fusion spec: {fusion_spec!r}")


class DownstreamModel(Module):
    """Encoder + optional fusion head + affine frame classifier.

    With ``fusion_spec=None`` the classifier reads one tap directly
    (``probe_tap``, defaulting to the top layer); this is both the
    per-layer probing configuration and the shape full/top-block/bias-only
    fine-tuning runs in.
    """

    def __init__(self, encoder: Encoder, fusion_spec, num_classes: int, seed: int,
                 probe_tap: int | None = None, dtype=np.float32):
        super().__init__()
        cfg = encoder.config
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.encoder = self.child("encoder", encoder)
        self.fusion_spec = fusion_spec
        if fusion_spec is None:
            tap = cfg.num_layers - 1 if probe_tap is None else probe_tap
            if not 0 <= tap < cfg.num_layers:
                raise ValueError(f"probe tap {tap} out of range for {cfg.num_layers} layers")
            self.tap_indices = (tap,)
            self.head = None
        else:
            if probe_tap is not None:
                raise ValueError("probe_tap only applies when no fusion head is used")
            fusion_spec.validate(cfg.num_layers)
            self.tap_indices = tuple(fusion_spec.tap_indices)
            self.head = self.child("head", _build_head(fusion_spec, cfg.model_dim, rng, dtype))
        self.classifier = self.child(
            "classifier", Linear(head_output_dim(fusion_spec, cfg.model_dim), num_classes, rng, dtype)
        )
        self.num_classes = num_classes

    def logits(self, frames: Tensor) -> Tensor:
        taps = self.encoder.encode_with_taps(frames, self.tap_indices)
        h = taps[self.tap_indices[0]] if self.head is None else self.head(taps)
        with scope("classifier"):
            return self.classifier(h)

    def loss(self, frames: Tensor, labels: np.ndarray) -> Tensor:
        lg = self.logits(frames)
        b, t, k = lg.shape
        lab = np.asarray(labels)
        if lab.shape != (b, t):
            raise ShapeError(f"labels {lab.shape} do not match logits {(b, t)}")
        with scope("loss"):
            flat = ops.reshape(lg, (b * t, k))
            return ops.cross_entropy_with_logits(flat, lab.reshape(-1))

    def predictions(self, frames: Tensor) -> np.ndarray:
        with no_grad():
            return self.logits(frames).data.argmax(axis=-1)


class ProbeBank(Module):
    """Independent per-tap linear classifiers sharing one encoder forward.

    Each probe's parameters receive gradients only from its own loss term,
    so jointly minimizing the sum is exactly equivalent to training the
    probes separately; the shared (frozen) encoder forward is just run
    once instead of once per tap.
    """

    def __init__(self, encoder: Encoder, taps, num_classes: int, seed: int, dtype=np.float32):
        super().__init__()
        cfg = encoder.config
        taps = tuple(sorted(taps))
        if not taps:
            raise ValueError("probe bank needs at least one tap")
        if len(set(taps)) != len(taps):
            raise ValueError(f"duplicate tap indices: {taps}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.encoder = self.child("encoder", encoder)
        self.tap_indices = taps
        self.probes = {
            i: self.child(f"probe_{i}", Linear(cfg.model_dim, num_classes, rng, dtype))
            for i in taps
        }
        self.num_classes = num_classes

    def loss(self, frames: Tensor, labels: np.ndarray) -> Tensor:
        taps = self.encoder.encode_with_taps(frames, self.tap_indices)
        lab = np.asarray(labels).reshape(-1)
        total = None
        for i in self.tap_indices:
            with scope(f"probe_{i}"):
                lg = self.probes[i](taps[i])
                b, t, k = lg.shape
                if lab.shape != (b * t,):
                    raise ShapeError(f"labels {lab.shape} do not match logits {(b, t)}")
                ce = ops.cross_entropy_with_logits(ops.reshape(lg, (b * t, k)), lab)
            total = ce if total is None else ops.add(total, ce)
        return total

    def predictions_per_tap(self, frames: Tensor) -> dict[int, np.ndarray]:
        with no_grad():
            taps = self.encoder.encode_with_taps(frames, self.tap_indices)
            return {
                i: self.probes[i](taps[i]).data.argmax(axis=-1)
                for i in self.tap_indices
            }


def build_model(spec, seed: int, state: dict | None = None, dtype=np.float32) -> DownstreamModel:
    """Canonical composition flow for one resource-accounting spec.

    Builds a fresh encoder, restores pretrained weights when ``state`` is
    given (keys under the ``encoder`` prefix), applies the fine-tuning
    strategy (which may attach adapters, so it runs after the restore),
    and wraps everything in the downstream classifier model.
    """
    from .encoder import build_encoder
    from .params import load_state
    from .peft import configure_peft

    encoder = build_encoder(spec.encoder, seed, dtype)
    if state is not None:
        load_state(encoder, state, prefix="encoder")
    configure_peft(encoder, spec.peft, seed=seed)
    return DownstreamModel(encoder, spec.fusion, spec.num_classes, seed,
                           probe_tap=spec.probe_tap, dtype=dtype)
