"""Dilated residual segmenter without long-range skip connections.

The network is a flat sequence of named layers.  Every layer consumes exactly
the output of its predecessor, which is what lets an early prefix of the
sequence be swapped for a domain-specific encoder later on.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArgumentError, ConfigurationError, DimensionError, TapLookupError

log = logging.getLogger(__name__)

LAYER_NAMES: tuple[str, ...] = (
    "Conv1", "RM1", "RM2", "RM3", "RM4", "RM5", "RM6", "RM7",
    "DRM8", "Conv9", "Conv10", "Smooth",
)
PRE_SOFTMAX = "pre-softmax"
DOWNSAMPLE = 8
# residual modules whose first convolution has stride 2
_STRIDED = ("RM2", "RM4", "RM6")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    in_channels: int = 3
    num_classes: int = 5
    base_width: int = 16
    max_width: int | None = None
    dilation: int = 2
    dropout_rate: float = 0.25

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % DOWNSAMPLE:
            raise ConfigurationError(
                f"input_size must be a positive multiple of {DOWNSAMPLE}, got {self.input_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.base_width < 1:
            raise ConfigurationError("in_channels and base_width must be >= 1")
        if self.max_width is not None and self.max_width < 1:
            raise ConfigurationError("max_width must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def width(self, stage: int) -> int:
        w = self.base_width * 2 ** stage
        return w if self.max_width is None else min(w, self.max_width)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ConvBlock(nn.Module):
    """Convolution, batch norm, optional ReLU and dropout."""

    def __init__(self, cin, cout, kernel, stride=1, dilation=1, dropout=0.0, act=True):
        super().__init__()
        pad = dilation * (kernel // 2)
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad,
                              dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = act
        self.drop = nn.Dropout(dropout) if act and dropout > 0 else nn.Identity()

    def forward(self, x):
        x = self.bn(self.conv(x))
        if self.act:
            x = F.relu(x)
        return self.drop(x)


class ResidualModule(nn.Module):
    """Two stacked 3x3 convolutions with a local shortcut."""

    def __init__(self, cin, cout, stride=1, dilation=1, dropout=0.0):
        super().__init__()
        pad = dilation
        self.conv_a = nn.Conv2d(cin, cout, 3, stride=stride, padding=pad, dilation=dilation, bias=False)
        self.bn_a = nn.BatchNorm2d(cout)
        self.drop_a = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.conv_b = nn.Conv2d(cout, cout, 3, padding=pad, dilation=dilation, bias=False)
        self.bn_b = nn.BatchNorm2d(cout)
        self.drop_b = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.drop_a(F.relu(self.bn_a(self.conv_a(x))))
        h = self.bn_b(self.conv_b(h))
        return self.drop_b(F.relu(h + self.shortcut(x)))


class SmoothUpsample(nn.Module):
    """Bilinear 8x upsampling followed by a 5x5 smoothing convolution (logits out)."""

    def __init__(self, channels, factor=DOWNSAMPLE):
        super().__init__()
        self.factor = factor
        self.conv = nn.Conv2d(channels, channels, 5, padding=2)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=self.factor, mode="bilinear", align_corners=False)
        return self.conv(x)


def _make_layers(cfg: NetworkConfig) -> dict[str, nn.Module]:
    p = cfg.dropout_rate
    w0, w1, w2, w3 = (cfg.width(s) for s in range(4))
    return {
        "Conv1": ConvBlock(cfg.in_channels, w0, 3, dropout=p),
        "RM1": ResidualModule(w0, w0, dropout=p),
        "RM2": ResidualModule(w0, w1, stride=2, dropout=p),
        "RM3": ResidualModule(w1, w1, dropout=p),
        "RM4": ResidualModule(w1, w2, stride=2, dropout=p),
        "RM5": ResidualModule(w2, w2, dropout=p),
        "RM6": ResidualModule(w2, w3, stride=2, dropout=p),
        "RM7": ResidualModule(w3, w3, dropout=p),
        "DRM8": nn.Sequential(
            ResidualModule(w3, w3, dilation=cfg.dilation, dropout=p),
            ResidualModule(w3, w3, dilation=cfg.dilation, dropout=p),
        ),
        "Conv9": ConvBlock(w3, w3, 3, dropout=p),
        "Conv10": ConvBlock(w3, cfg.num_classes, 1, act=False),
        "Smooth": SmoothUpsample(cfg.num_classes),
    }


def layer_index(name: str) -> int:
    try:
        return LAYER_NAMES.index(name)
    except ValueError:
        raise ArgumentError(f"unknown layer {name!r}; expected one of {LAYER_NAMES}") from None


def tap_key(name: str) -> str:
    """Normalize a tap name; ``Smooth`` and ``pre-softmax`` are the same tensor."""
    if name == PRE_SOFTMAX or name in LAYER_NAMES:
        return name
    raise TapLookupError(f"unknown tap {name!r}; valid taps are {LAYER_NAMES + (PRE_SOFTMAX,)}")


def run_layers(layers: nn.ModuleDict, x: torch.Tensor, start: int, stop: int,
               taps: Iterable[str], acts: dict) -> torch.Tensor:
    """Apply ``LAYER_NAMES[start:stop]`` from ``layers`` in order, recording taps."""
    taps = set(taps)
    for name in LAYER_NAMES[start:stop]:
        x = layers[name](x)
        if name in taps:
            acts[name] = x
        if name == "Smooth" and PRE_SOFTMAX in taps:
            acts[PRE_SOFTMAX] = x
    return x


class SegNet(nn.Module):
    """The source-domain segmenter ``Conv1 -> RM1..RM7 -> DRM8 -> Conv9 -> Conv10 -> Smooth``."""

    layer_names = LAYER_NAMES

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.layers = nn.ModuleDict(_make_layers(cfg))

    def check_input(self, x: torch.Tensor):
        s, c = self.cfg.input_size, self.cfg.in_channels
        if x.dim() != 4 or x.shape[1] != c or x.shape[2] != s or x.shape[3] != s:
            raise DimensionError(f"expected input (N, {c}, {s}, {s}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, taps: Iterable[str] = ()):
        taps = {tap_key(t) for t in taps}
        self.check_input(x)
        acts: dict[str, torch.Tensor] = {}
        logits = run_layers(self.layers, x, 0, len(LAYER_NAMES), taps, acts)
        return torch.softmax(logits, dim=1), acts

    def conv_weights(self) -> list[torch.Tensor]:
        """Convolution kernels, the tensors the L2 penalty acts on."""
        return [p for n, p in self.named_parameters() if n.endswith("weight") and p.dim() > 1]


def build_segmenter(cfg: NetworkConfig, seed: int = 0) -> SegNet:
    return SegNet(cfg, seed)


def forward(model: SegNet, batch: torch.Tensor, taps: Iterable[str] = ()):
    return model(batch, taps)


def shape_trace(cfg: NetworkConfig) -> dict[str, tuple[int, int]]:
    """(channels, side) of every layer output, from conv arithmetic alone."""
    side = cfg.input_size
    out = {}
    chans = {"Conv1": 0, "RM1": 0, "RM2": 1, "RM3": 1, "RM4": 2, "RM5": 2,
             "RM6": 3, "RM7": 3, "DRM8": 3, "Conv9": 3}
    for name in LAYER_NAMES:
        if name in _STRIDED:
            # 3x3, padding 1, stride 2
            side = (side + 2 * 1 - 3) // 2 + 1
        if name == "Smooth":
            side *= DOWNSAMPLE
        c = cfg.width(chans[name]) if name in chans else cfg.num_classes
        out[name] = (c, side)
    out[PRE_SOFTMAX] = out["Smooth"]
    return out


# ---------------------------------------------------------------- losses

DICE_EPS = 1e-5


@dataclass
class LossWeights:
    lambda_ce: float = 1.0
    beta_l2: float = 1e-4
    class_weights: Sequence[float] = field(default_factory=lambda: [1.0] * 5)

    def __post_init__(self):
        if self.lambda_ce < 0 or self.beta_l2 < 0 or any(w < 0 for w in self.class_weights):
            raise ConfigurationError("loss weights must be nonnegative")


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(N, H, W) integer labels to (N, C, H, W) float one-hot."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def _check_pair(probs, onehot):
    if probs.shape != onehot.shape:
        raise DimensionError(f"probs {tuple(probs.shape)} vs labels {tuple(onehot.shape)}")
    if probs.dim() != 4:
        raise DimensionError(f"expected (N, C, H, W), got {tuple(probs.shape)}")


def dice_loss_term(probs: torch.Tensor, onehot: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Negative soft Dice summed over classes, in ``[-C, 0]``."""
    _check_pair(probs, onehot)
    onehot = onehot.to(probs.dtype)
    dims = (0, 2, 3)
    num = 2.0 * (onehot * probs).sum(dims)
    den = (onehot * onehot).sum(dims) + (probs * probs).sum(dims) + eps
    return -(num / den).sum()


def weighted_ce_term(probs: torch.Tensor, onehot: torch.Tensor, class_weights) -> torch.Tensor:
    _check_pair(probs, onehot)
    w = torch.as_tensor(class_weights, dtype=probs.dtype, device=probs.device)
    if w.dim() != 1 or w.numel() != probs.shape[1]:
        raise DimensionError(f"{w.numel()} class weights for {probs.shape[1]} classes")
    logp = torch.log(probs.clamp(1e-7, 1.0))
    return -(w.view(1, -1, 1, 1) * onehot.to(probs.dtype) * logp).sum()


def l2_term(params: Iterable[torch.Tensor]) -> torch.Tensor:
    return sum((p * p).sum() for p in params)


def seg_loss(probs, onehot, weights: LossWeights, model_params: Iterable[torch.Tensor]) -> torch.Tensor:
    loss = dice_loss_term(probs, onehot)
    if weights.lambda_ce:
        loss = loss + weights.lambda_ce * weighted_ce_term(probs, onehot, weights.class_weights)
    if weights.beta_l2:
        loss = loss + weights.beta_l2 * l2_term(model_params)
    return loss


def class_weights(label_maps: Sequence, num_classes: int) -> np.ndarray:
    """Inverse pixel-frequency weights rescaled to mean 1.

    Classes that never occur get the largest weight among observed classes.
    """
    counts = np.zeros(num_classes, dtype=np.float64)
    for lab in label_maps:
        lab = np.asarray(lab)
        counts += np.bincount(lab.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise ArgumentError("class_weights needs at least one labelled pixel")
    present = counts > 0
    inv = np.zeros(num_classes)
    inv[present] = total / counts[present]
    inv[~present] = inv[present].max()
    return inv / inv.mean()


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 10
    lr: float = 1e-3
    lambda_ce: float = 1.0
    beta_l2: float = 1e-4
    seed: int = 0
    log_every: int = 100
    schedule: str = "constant"   # or "cosine": anneal lr to 0 over the run

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("iterations >= 0, batch_size >= 1 and lr > 0 required")


def train_source(model: SegNet, dataset, cfg: TrainConfig, augment=None):
    """Supervised training with Adam on a labelled slice dataset.

    ``dataset`` needs ``images`` (N, C, H, W) and ``labels`` (N, H, W).
    ``augment`` is an optional ``(images, labels, rng) -> (images, labels)``
    hook applied per batch.  Returns ``(model, loss_history)``.
    """
    n = len(dataset)
    if n == 0:
        raise ArgumentError("train_source needs a non-empty dataset")
    labels_all = dataset.labels
    weights = LossWeights(cfg.lambda_ce, cfg.beta_l2,
                          class_weights(labels_all.numpy(), model.cfg.num_classes).tolist())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = None
    if cfg.schedule == "cosine" and cfg.iterations:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iterations)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for it in range(cfg.iterations):
            idx = torch.from_numpy(rng.integers(0, n, size=min(cfg.batch_size, n)))
            x, y = dataset.images[idx], labels_all[idx]
            if augment is not None:
                x, y = augment(x, y, rng)
            probs, _ = model(x)
            loss = seg_loss(probs, one_hot(y, model.cfg.num_classes).to(probs.dtype),
                            weights, model.conv_weights())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            history.append(float(loss.detach()))
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                log.info("train_source it=%d loss=%.4f", it + 1, history[-1])
    model.eval()
    return model, history


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    """Hard labels for a stack of inputs, in eval mode."""
    was_training = model.training
    model.eval()
    out = [model(images[i:i + batch_size])[0].argmax(1) for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)
