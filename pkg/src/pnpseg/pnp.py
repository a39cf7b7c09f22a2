"""Plug-and-play encoder swap.

A domain adaptation module (DAM) is a trainable copy of the segmenter's
first ``d`` layers.  Target images go through the DAM and then through the
frozen upper layers of the source segmenter; source images keep using the
original path, which is never written to.
"""

from __future__ import annotations

import copy
import enum
from typing import Iterable

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ArgumentError, DimensionError, FormatError
from .segnet import LAYER_NAMES, PRE_SOFTMAX, SegNet, layer_index, run_layers, tap_key

DEFAULT_DEPTH = "RM6"


class DomainRoute(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Dam(nn.Module):
    """Encoder replacing ``LAYER_NAMES[:depth_index + 1]`` for target inputs."""

    def __init__(self, layers: dict[str, nn.Module], depth: str):
        super().__init__()
        self.depth = depth
        self.depth_index = layer_index(depth)
        names = LAYER_NAMES[:self.depth_index + 1]
        if list(layers) != list(names):
            raise ArgumentError(f"DAM layers {list(layers)} do not match {list(names)}")
        self.layers = nn.ModuleDict(layers)

    @property
    def layer_names(self) -> tuple[str, ...]:
        return LAYER_NAMES[:self.depth_index + 1]


def init_dam(model: SegNet, depth: str = DEFAULT_DEPTH) -> Dam:
    """Copy the source encoder up to and including ``depth``."""
    if depth not in LAYER_NAMES:
        raise ArgumentError(f"adaptation depth {depth!r} is not a layer of {LAYER_NAMES}")
    d = layer_index(depth)
    if d >= len(LAYER_NAMES) - 1:
        raise ArgumentError(f"adaptation depth must leave at least one frozen layer, got {depth!r}")
    layers = {name: copy.deepcopy(model.layers[name]) for name in LAYER_NAMES[:d + 1]}
    dam = Dam(layers, depth)
    # the source may already be frozen; the copy is the part that trains
    for p in dam.parameters():
        p.requires_grad_(True)
    return dam


def freeze(model: nn.Module) -> nn.Module:
    """Eval mode (running BN statistics, no dropout) and no gradients."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _check_compatible(model: SegNet, dam: Dam):
    top = dam.layer_names[-1]
    shapes = [p.shape for p in dam.layers[top].parameters()]
    if shapes != [p.shape for p in model.layers[top].parameters()]:
        raise DimensionError(f"DAM layer {top} does not match the segmenter's")


def route(which: DomainRoute | str, model: SegNet, dam: Dam | None, x: torch.Tensor,
          taps: Iterable[str] = ()):
    """Forward ``x`` through the source path or the DAM-prefixed target path.

    Taps at or below the adaptation depth come from the DAM on the target
    route.  Returns ``(probabilities, activations)``.
    """
    which = DomainRoute(which)
    if which is DomainRoute.SOURCE:
        return model(x, taps)
    if dam is None:
        raise ArgumentError("target route needs a DAM")
    taps = {tap_key(t) for t in taps}
    model.check_input(x)
    _check_compatible(model, dam)
    acts: dict[str, torch.Tensor] = {}
    h = run_layers(dam.layers, x, 0, dam.depth_index + 1, taps, acts)
    logits = run_layers(model.layers, h, dam.depth_index + 1, len(LAYER_NAMES), taps, acts)
    return torch.softmax(logits, dim=1), acts


class RoutedSegmenter(nn.Module):
    """A segmenter bound to one route, for inference code that wants ``model(x)``."""

    def __init__(self, model: SegNet, dam: Dam | None, which: DomainRoute | str):
        super().__init__()
        self.model, self.dam, self.which = model, dam, DomainRoute(which)
        self.cfg = model.cfg

    def forward(self, x, taps=()):
        return route(self.which, self.model, self.dam, x, taps)


def trainable_set(model: SegNet, dam: Dam) -> set[str]:
    """Names of the parameter blocks adaptation may update: the DAM layers only."""
    return {f"dam.{name}" for name in dam.layer_names
            if any(True for _ in dam.layers[name].parameters())}


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def verify_source_preservation(before: nn.Module | dict, after: nn.Module | dict) -> bool:
    """True iff every tensor of the source model is bitwise unchanged."""
    a = before.state_dict() if isinstance(before, nn.Module) else before
    b = after.state_dict() if isinstance(after, nn.Module) else after
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if x.shape != y.shape or x.dtype != y.dtype:
            return False
        # compare raw bytes so that -0.0 vs 0.0 and NaN payloads count as changes
        if not torch.equal(x.contiguous().view(-1).view(torch.uint8) if x.is_floating_point() else x,
                           y.contiguous().view(-1).view(torch.uint8) if y.is_floating_point() else y):
            return False
    return True


def save_dam(dam: Dam, directory, iteration: int = 0, extra: dict | None = None):
    meta = {"kind": "dam", "depth": dam.depth, "layer_names": list(dam.layer_names),
            "iteration": iteration, **(extra or {})}
    return save_checkpoint(directory, dam.state_dict(), meta)


def load_dam(directory, model: SegNet) -> Dam:
    state, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "dam":
        raise FormatError(f"{directory} is not a DAM checkpoint")
    dam = init_dam(model, manifest["depth"])
    dam.load_state_dict(state)
    dam.eval()
    return dam


__all__ = [
    "DEFAULT_DEPTH", "Dam", "DomainRoute", "PRE_SOFTMAX", "RoutedSegmenter", "freeze", "init_dam",
    "load_dam", "route", "save_dam", "snapshot", "trainable_set", "verify_source_preservation",
]
