"""Dual-critic Wasserstein adaptation of the DAM.

Two critics score the target path against the frozen source path: one over
multi-level activations resized to a common grid, one over the softmax masks.
Critics are kept Lipschitz by weight clipping; the DAM is the generator.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import UnlabelledView
from .errors import ArgumentError, ConfigurationError, DimensionError, TapLookupError
from .pnp import Dam, DomainRoute, freeze, route
from .segnet import LAYER_NAMES, PRE_SOFTMAX, NetworkConfig, SegNet, layer_index, shape_trace

log = logging.getLogger(__name__)

DEFAULT_TAPS = ("RM4", "RM6", "Conv10", PRE_SOFTMAX)


@dataclass(frozen=True)
class TapPlan:
    feature_taps: tuple[str, ...] = DEFAULT_TAPS
    common_resolution: int = 16

    def validate(self, depth: str):
        if not self.feature_taps:
            raise ConfigurationError("tap plan is empty")
        d = layer_index(depth)
        order = [len(LAYER_NAMES) if t == PRE_SOFTMAX else layer_index(t) for t in self.feature_taps]
        if not any(i <= d for i in order):
            raise ConfigurationError(f"tap plan {self.feature_taps} has no layer inside the DAM (depth {depth})")
        if not any(i > d for i in order):
            raise ConfigurationError(f"tap plan {self.feature_taps} has no frozen layer above depth {depth}")
        if len(set(self.feature_taps)) != len(self.feature_taps):
            raise ConfigurationError("duplicate taps")

    def channels(self, net_cfg: NetworkConfig) -> int:
        trace = shape_trace(net_cfg)
        return sum(trace[t][0] for t in self.feature_taps)


def aggregate_features(acts: dict[str, torch.Tensor], plan: TapPlan) -> torch.Tensor:
    """Resize every tapped map to the common grid and concatenate channels in tap order."""
    r = plan.common_resolution
    parts = []
    for name in plan.feature_taps:
        if name not in acts:
            raise TapLookupError(f"activation {name!r} was not tapped")
        a = acts[name]
        if a.shape[-2:] != (r, r):
            a = F.interpolate(a, size=(r, r), mode="bilinear", align_corners=False)
        parts.append(a)
    return torch.cat(parts, dim=1)


class Critic(nn.Module):
    """Strided 3x3 conv blocks with Leaky-ReLU, global average pooling and a linear score.

    No batch norm and no output nonlinearity.
    """

    def __init__(self, in_channels: int, n_blocks: int, width: int = 32, slope: float = 0.2):
        super().__init__()
        if n_blocks < 1:
            raise ConfigurationError("a critic needs at least one block")
        self.in_channels = in_channels
        self.slope = slope
        chans = [in_channels] + [width * min(2 ** i, 4) for i in range(n_blocks)]
        self.blocks = nn.ModuleList(
            nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        self.act = nn.LeakyReLU(slope)
        self.score = nn.Linear(chans[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"critic expects (N, {self.in_channels}, H, W), got {tuple(x.shape)}")
        for conv in self.blocks:
            x = self.act(conv(x))
        return self.score(x.mean(dim=(2, 3))).squeeze(1)


@dataclass
class CriticPair:
    feature_critic: Critic
    mask_critic: Critic | None
    clip_bound: float = 0.03

    def modules(self) -> list[Critic]:
        return [c for c in (self.feature_critic, self.mask_critic) if c is not None]

    def parameters(self):
        for c in self.modules():
            yield from c.parameters()

    def max_abs(self) -> float:
        return max(float(p.detach().abs().max()) for p in self.parameters())


def build_critics(net_cfg: NetworkConfig, plan: TapPlan, seed: int = 0, width: int = 32,
                  use_mask_critic: bool = True, clip_bound: float = 0.03,
                  feature_blocks: int = 5, mask_blocks: int = 3) -> CriticPair:
    """Feature critic (deeper) and mask critic, initialised from independent seeds and clipped."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed * 2 + 1)
        df = Critic(plan.channels(net_cfg), feature_blocks, width)
        dm = None
        if use_mask_critic:
            torch.manual_seed(seed * 2 + 2)
            dm = Critic(net_cfg.num_classes, mask_blocks, width)
    pair = CriticPair(df, dm, clip_bound)
    clip_params(pair.parameters(), clip_bound)
    return pair


def critic_f(critic: CriticPair | Critic, features: torch.Tensor) -> torch.Tensor:
    c = critic.feature_critic if isinstance(critic, CriticPair) else critic
    return c(features)


def critic_m(critic: CriticPair | Critic, probs: torch.Tensor) -> torch.Tensor:
    c = critic.mask_critic if isinstance(critic, CriticPair) else critic
    if c is None:
        raise ConfigurationError("mask critic is disabled")
    return c(probs)


def _nonempty(*scores):
    for s in scores:
        if s is not None and s.numel() == 0:
            raise ArgumentError("empty score batch")


def loss_generator(f_scores: torch.Tensor, m_scores: torch.Tensor | None,
                   mask_ratio: float, loss_scale: float) -> torch.Tensor:
    """``loss_scale * (-mean(f) - mask_ratio * mean(m))``; ``m_scores=None`` drops the mask term."""
    _nonempty(f_scores, m_scores)
    loss = -f_scores.mean()
    if m_scores is not None:
        loss = loss - mask_ratio * m_scores.mean()
    return loss_scale * loss


def loss_critic(target_scores: torch.Tensor, source_scores: torch.Tensor,
                loss_scale: float) -> torch.Tensor:
    """``loss_scale * (mean(target) - mean(source))``, minimised by the critic."""
    _nonempty(target_scores, source_scores)
    return loss_scale * (target_scores.mean() - source_scores.mean())


loss_critic_f = loss_critic
loss_critic_m = loss_critic


@torch.no_grad()
def clip_params(params: Iterable[torch.Tensor] | nn.Module, bound: float) -> float:
    """Clamp every value into ``[-bound, bound]`` in place; returns the resulting max |value|."""
    if not bound > 0:
        raise ArgumentError(f"clip bound must be positive, got {bound}")
    if isinstance(params, nn.Module):
        params = params.parameters()
    m = 0.0
    for p in params:
        p.clamp_(-bound, bound)
        m = max(m, float(p.abs().max()))
    return m


# ---------------------------------------------------------------- training loop

@dataclass
class AdaptConfig:
    n_critic: int = 20
    lr: float = 3e-4
    decay: float = 0.98
    decay_every: int = 100
    loss_scale: float = 0.002
    mask_ratio: float = 0.1
    use_mask_critic: bool = True
    critic_pretrain_iters: int = 20000
    joint_updates: int = 1000
    batch_size: int = 6
    clip_bound: float = 0.03
    critic_width: int = 32
    rms_alpha: float = 0.9
    rms_eps: float = 1e-10
    feature_taps: tuple[str, ...] = DEFAULT_TAPS
    common_resolution: int | None = None   # None: input_size // 4
    cache_source: bool = True
    log_every: int = 50

    def __post_init__(self):
        self.feature_taps = tuple(self.feature_taps)
        if self.n_critic < 1:
            raise ConfigurationError("n_critic must be >= 1")
        if self.mask_ratio < 0:
            raise ConfigurationError("mask_ratio must be >= 0")
        if not 0 < self.decay <= 1:
            raise ConfigurationError("decay must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ConfigurationError("decay_every and batch_size must be >= 1")
        if self.critic_pretrain_iters < 0 or self.joint_updates < 0:
            raise ConfigurationError("iteration counts must be >= 0")
        if not self.clip_bound > 0:
            raise ConfigurationError("clip_bound must be positive")

    def tap_plan(self, net_cfg: NetworkConfig) -> TapPlan:
        res = self.common_resolution or net_cfg.input_size // 4
        return TapPlan(self.feature_taps, res)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["feature_taps"] = list(self.feature_taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(cfg: AdaptConfig, joint_update: int) -> float:
    """Learning rate of the ``joint_update``-th (1-based) generator cycle."""
    return cfg.lr * cfg.decay ** (joint_update // cfg.decay_every)


HISTORY_FIELDS = ("iteration", "phase", "role", "loss_f", "loss_m", "lr",
                  "clip_violations", "max_abs_param")


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def adapt(model: SegNet, dam: Dam, critics: CriticPair, source_data, target_data,
          cfg: AdaptConfig, seed: int = 0):
    """Train the DAM against the critics; the source model stays frozen.

    ``source_data`` needs ``images``; ``target_data`` is wrapped so that any
    label access raises.  Returns ``(dam, critics, history)`` where history is
    a list of dict rows with ``HISTORY_FIELDS``.
    """
    if len(source_data) == 0 or len(target_data) == 0:
        raise ArgumentError("adapt needs non-empty source and target data")
    if not isinstance(target_data, UnlabelledView):
        target_data = UnlabelledView(target_data)
    use_mask = critics.mask_critic is not None
    if cfg.use_mask_critic != use_mask:
        raise ConfigurationError("cfg.use_mask_critic disagrees with the critic pair")
    plan = cfg.tap_plan(model.cfg)
    plan.validate(dam.depth)
    taps = set(plan.feature_taps)

    freeze(model)
    dam.eval()
    for p in dam.parameters():
        p.requires_grad_(True)
    for p in critics.parameters():
        p.requires_grad_(True)

    xs_all, xt_all = source_data.images, target_data.images
    ns, nt = len(xs_all), len(xt_all)
    rng = np.random.default_rng(seed)
    bs = cfg.batch_size

    def source_inputs_fn():
        if not cfg.cache_source:
            def f(idx):
                with torch.no_grad():
                    probs, acts = route(DomainRoute.SOURCE, model, None, xs_all[idx], taps)
                    return aggregate_features(acts, plan), probs
            return f
        feats, probs = [], []
        with torch.no_grad():
            for i in range(0, ns, 64):
                p, a = route(DomainRoute.SOURCE, model, None, xs_all[i:i + 64], taps)
                feats.append(aggregate_features(a, plan))
                probs.append(p)
        feats, probs = torch.cat(feats), torch.cat(probs)
        return lambda idx: (feats[idx], probs[idx])

    source_inputs = source_inputs_fn()
    opt_c = torch.optim.RMSprop(list(critics.parameters()), lr=cfg.lr, alpha=cfg.rms_alpha, eps=cfg.rms_eps)
    opt_g = torch.optim.RMSprop(list(dam.parameters()), lr=cfg.lr, alpha=cfg.rms_alpha, eps=cfg.rms_eps)
    history: list[dict] = []
    it = 0

    def critic_step(phase, lr):
        nonlocal it
        idx_s = torch.from_numpy(rng.integers(0, ns, size=bs))
        idx_t = torch.from_numpy(rng.integers(0, nt, size=bs))
        fs, ms = source_inputs(idx_s)
        with torch.no_grad():
            pt, at = route(DomainRoute.TARGET, model, dam, xt_all[idx_t], taps)
            ft = aggregate_features(at, plan)
        loss_f = loss_critic(critic_f(critics, ft), critic_f(critics, fs), cfg.loss_scale)
        total = loss_f
        loss_m = None
        if use_mask:
            loss_m = loss_critic(critic_m(critics, pt), critic_m(critics, ms), cfg.loss_scale)
            total = total + loss_m
        opt_c.zero_grad(set_to_none=True)
        total.backward()
        opt_c.step()
        max_abs = clip_params(critics.parameters(), critics.clip_bound)
        violations = sum(int((p.detach().abs() > critics.clip_bound).sum()) for p in critics.parameters())
        it += 1
        history.append({"iteration": it, "phase": phase, "role": "critic",
                        "loss_f": float(loss_f.detach()),
                        "loss_m": None if loss_m is None else float(loss_m.detach()),
                        "lr": lr, "clip_violations": violations, "max_abs_param": max_abs})

    def generator_step(lr):
        nonlocal it
        idx_t = torch.from_numpy(rng.integers(0, nt, size=bs))
        for p in critics.parameters():
            p.requires_grad_(False)
        pt, at = route(DomainRoute.TARGET, model, dam, xt_all[idx_t], taps)
        f_scores = critic_f(critics, aggregate_features(at, plan))
        m_scores = critic_m(critics, pt) if use_mask else None
        loss = loss_generator(f_scores, m_scores, cfg.mask_ratio, cfg.loss_scale)
        opt_g.zero_grad(set_to_none=True)
        loss.backward()
        opt_g.step()
        for p in critics.parameters():
            p.requires_grad_(True)
        it += 1
        with torch.no_grad():
            lf = float(-cfg.loss_scale * f_scores.mean())
            lm = None if m_scores is None else float(-cfg.loss_scale * cfg.mask_ratio * m_scores.mean())
        history.append({"iteration": it, "phase": "joint", "role": "generator",
                        "loss_f": lf, "loss_m": lm, "lr": lr, "clip_violations": 0,
                        "max_abs_param": critics.max_abs()})

    for _ in range(cfg.critic_pretrain_iters):
        critic_step("pretrain", cfg.lr)
    if cfg.critic_pretrain_iters:
        log.info("critic pretraining done: loss_f=%.3g", history[-1]["loss_f"])
    for k in range(1, cfg.joint_updates + 1):
        lr = lr_at(cfg, k)
        _set_lr(opt_c, lr)
        _set_lr(opt_g, lr)
        for _ in range(cfg.n_critic):
            critic_step("joint", lr)
        generator_step(lr)
        if cfg.log_every and k % cfg.log_every == 0:
            log.info("joint update %d: critic loss_f=%.3g loss_m=%s gen loss_f=%.3g",
                     k, history[-2]["loss_f"], history[-2]["loss_m"], history[-1]["loss_f"])
    dam.eval()
    return dam, critics, history


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history_csv(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in HISTORY_FIELDS])
    return path


def read_history_csv(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as f:
        for r in csv.DictReader(f):
            rows.append({
                "iteration": int(r["iteration"]),
                "phase": r["phase"],
                "role": r["role"],
                "loss_f": float(r["loss_f"]) if r["loss_f"] else None,
                "loss_m": float(r["loss_m"]) if r["loss_m"] else None,
                "lr": float(r["lr"]),
                "clip_violations": int(r["clip_violations"]),
                "max_abs_param": float(r["max_abs_param"]),
            })
    return rows
