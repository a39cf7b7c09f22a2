"""Experiment runs, ablation sweeps, result tables and history plots.

A run directory holds everything needed to reproduce and inspect one
experiment::

    run/
      manifest.json      config, seeds, code version
      metrics.csv        subject,class,dice,asd
      summary.json       aggregated numbers (plus wall time)
      model/             segmenter checkpoint      (seg-source, seg-target)
      dam/ critics/      adaptation checkpoints    (pnp-ada)
      history.csv        critic/generator trace    (pnp-ada)
      train_history.csv  supervised loss trace     (seg-source, seg-target)
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import platform
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .adversarial import (DEFAULT_TAPS, AdaptConfig, adapt, build_critics, lr_at,
                          read_history_csv, write_history_csv)
from .checkpoint import load_segmenter, save_checkpoint, save_segmenter
from .data import STRUCTURES, AugmentConfig, batch_augmenter, normalize, read_dataset, slice_dataset
from .errors import ArgumentError, ConfigurationError, DependencyError
from .metrics import (evaluate_subject, format_mean_std, largest_cc, mean_foreground_dice,
                      read_metrics_csv, summarize, write_metrics_csv)
from .pnp import (DomainRoute, RoutedSegmenter, init_dam, route, save_dam, snapshot,
                  verify_source_preservation)
from .segnet import NetworkConfig, TrainConfig, build_segmenter, predict, train_source

log = logging.getLogger(__name__)

MODES = ("seg-source", "seg-target", "no-da", "pnp-ada")
SWEEP_RATIOS = tuple(round(0.1 * i, 1) for i in range(8))   # 0 (feature critic only), 0.1 .. 0.7

# Desk scale: 64x64 phantom slices, minutes per run on one CPU core.
DESK_PRESET = {
    "network": {"input_size": 64, "num_classes": 5, "base_width": 8, "dropout_rate": 0.0},
    "train": {"iterations": 1500, "batch_size": 10, "lr": 1e-3, "schedule": "cosine"},
    "adapt": {"critic_pretrain_iters": 100, "joint_updates": 150, "n_critic": 20, "batch_size": 6},
}
FULL_PRESET = {
    "network": {"input_size": 256, "num_classes": 5, "base_width": 32, "dropout_rate": 0.25},
    "train": {"iterations": 20000, "batch_size": 10, "lr": 1e-3},
    "adapt": {"critic_pretrain_iters": 20000, "joint_updates": 3000, "n_critic": 20, "batch_size": 6},
}

# Published MM-WHS numbers (MRI -> CT unless noted), kept for documentation
# tables only; they cannot be reproduced on the phantom.
REFERENCE_ROWS = {
    "no adaptation, MRI->CT (published)": {
        "dice": ["31.5±23.9", "2.7±0.8", "3.4±5.8", "15.3±17.2", "13.2±11.9"],
        "asd": ["21.4±14.1", "19.6±4.6", "N/A", "20.7±7.7", "N/A"],
    },
    "plug-and-play, MRI->CT (published)": {
        "dice": ["74.0±7.3", "68.9±5.2", "61.9±10.7", "50.8±7.0", "63.9±7.5"],
        "asd": ["12.8±3.2", "6.3±2.3", "17.4±7.0", "14.7±4.8", "12.8±4.3"],
    },
    "plug-and-play, CT->MRI (published)": {
        "dice": ["43.7±10.8", "47.0±7.3", "77.7±10.4", "48.6±2.9", "54.3±7.9"],
        "asd": ["11.4±3.2", "14.5±4.1", "4.5±1.4", "5.3±1.8", "8.9±2.6"],
    },
}


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    mode: str
    data_dir: str
    direction: str = "A->B"
    seed: int = 0
    source_run: str | None = None
    depth: str = "RM6"
    postprocess: bool = False
    network: dict = field(default_factory=lambda: dict(DESK_PRESET["network"]))
    train: dict = field(default_factory=lambda: dict(DESK_PRESET["train"]))
    adapt: dict = field(default_factory=lambda: dict(DESK_PRESET["adapt"]))
    augment: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.domains  # validates direction
        if self.mode in ("no-da", "pnp-ada") and not self.source_run:
            raise ConfigurationError(f"mode {self.mode} needs source_run (a seg-source run directory)")
        for r in self.ablation.get("mask_ratios", []):
            if not any(abs(r - v) < 1e-9 for v in SWEEP_RATIOS):
                raise ConfigurationError(f"sweep ratio {r} not in {SWEEP_RATIOS}")
        for t in self.ablation.get("remove_taps", []):
            if t not in DEFAULT_TAPS:
                raise ConfigurationError(f"cannot remove tap {t!r}; default taps are {DEFAULT_TAPS}")
        unknown = set(self.ablation) - {"mask_ratios", "remove_taps", "include_mask_disabled"}
        if unknown:
            raise ConfigurationError(f"unknown ablation keys {sorted(unknown)}")
        # build every sub-config once so typos fail before any work starts
        try:
            self.net_config()
            self.train_config()
            self.adapt_config()
            AugmentConfig(**self.augment)
        except TypeError as e:
            raise ConfigurationError(str(e)) from None

    @property
    def domains(self) -> tuple[str, str]:
        parts = self.direction.replace("→", "->").split("->")
        if len(parts) != 2 or not all(p.strip() for p in parts) or parts[0].strip() == parts[1].strip():
            raise ConfigurationError(f"direction must look like 'A->B', got {self.direction!r}")
        return parts[0].strip(), parts[1].strip()

    def reversed(self) -> "ExperimentConfig":
        s, t = self.domains
        return dataclasses.replace(self, direction=f"{t}->{s}")

    def net_config(self) -> NetworkConfig:
        return NetworkConfig(**self.network)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed})

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(**self.adapt)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown experiment keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_manifest(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return cls.from_dict(json.loads(path.read_text())["config"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def evaluate_volumes(net, volumes, input_size: int, num_classes: int, postprocess: bool = False) -> list[dict]:
    """Slice-wise prediction reassembled into 3D, then per-class Dice/ASD per subject."""
    rows = []
    for v in volumes:
        ds = slice_dataset([v], input_size)
        pred = predict(net, ds.images).numpy().astype(np.uint8)
        pred = np.moveaxis(pred, 0, 1)          # back to (z, y, x) with y the slice axis
        if pred.shape != v.labels.shape:
            raise ArgumentError("evaluation needs volumes whose in-plane size equals input_size")
        if postprocess:
            pred = largest_cc(pred, num_classes)
        for r in evaluate_subject(pred, v.labels, num_classes):
            rows.append({"subject": v.subject, **r})
    return rows


def _load_source_run(cfg: ExperimentConfig):
    src = Path(cfg.source_run)
    if not (src / "model" / "manifest.json").exists():
        raise DependencyError(f"missing prerequisite: seg-source run {str(src)!r} has no model checkpoint")
    man = json.loads((src / "manifest.json").read_text()) if (src / "manifest.json").exists() else {}
    src_cfg = man.get("config", {})
    if src_cfg and src_cfg.get("mode") != "seg-source":
        raise DependencyError(f"{src} is a {src_cfg.get('mode')} run, expected seg-source")
    if src_cfg and ExperimentConfig.from_dict(src_cfg).domains[0] != cfg.domains[0]:
        raise DependencyError(f"{src} was trained on domain {ExperimentConfig.from_dict(src_cfg).domains[0]}, "
                              f"this run needs {cfg.domains[0]}")
    return load_segmenter(src / "model")


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    """Execute one experiment and fill ``out_dir``; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src_dom, tgt_dom = cfg.domains
    net_cfg = cfg.net_config()
    manifest = {
        "config": cfg.to_dict(),
        "seeds": [cfg.seed],
        "code_version": code_version(),
        "torch": torch.__version__,
        "python": platform.python_version(),
    }
    _write_json(out / "manifest.json", manifest)
    t0 = time.perf_counter()
    summary: dict = {"mode": cfg.mode, "direction": cfg.direction, "seed": cfg.seed}

    if cfg.mode in ("seg-source", "seg-target"):
        dom = src_dom if cfg.mode == "seg-source" else tgt_dom
        ds = slice_dataset(read_dataset(cfg.data_dir, dom, "train"), net_cfg.input_size)
        model = build_segmenter(net_cfg, cfg.seed)
        aug = AugmentConfig(**cfg.augment) if cfg.augment else None
        tcfg = cfg.train_config()
        model, losses = train_source(model, ds, tcfg,
                                     augment=batch_augmenter(aug) if aug and not aug.is_identity else None)
        save_segmenter(model, out / "model", iteration=tcfg.iterations, extra={"domain": dom})
        with (out / "train_history.csv").open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("iteration", "loss"))
            w.writerows((i + 1, repr(l)) for i, l in enumerate(losses))
        net, eval_dom = model, dom
    elif cfg.mode == "no-da":
        net, eval_dom = _load_source_run(cfg), tgt_dom
    else:
        model = _load_source_run(cfg)
        acfg = cfg.adapt_config()
        plan = acfg.tap_plan(model.cfg)
        before = snapshot(model)
        dam = init_dam(model, cfg.depth)
        critics = build_critics(model.cfg, plan, cfg.seed, acfg.critic_width,
                                acfg.use_mask_critic, acfg.clip_bound)
        src_ds = slice_dataset(read_dataset(cfg.data_dir, src_dom, "train"), model.cfg.input_size)
        tgt_ds = slice_dataset(read_dataset(cfg.data_dir, tgt_dom, "train"), model.cfg.input_size,
                               with_labels=False)
        probe = src_ds.images[:8]
        with torch.no_grad():
            probe_before = route(DomainRoute.SOURCE, model, None, probe)[0]
        dam, critics, history = adapt(model, dam, critics, src_ds, tgt_ds.unlabelled(), acfg, cfg.seed)
        with torch.no_grad():
            probe_after = route(DomainRoute.SOURCE, model, None, probe)[0]
        summary["source_preserved"] = verify_source_preservation(before, model)
        summary["source_outputs_identical"] = probe_before.numpy().tobytes() == probe_after.numpy().tobytes()
        save_dam(dam, out / "dam", iteration=acfg.joint_updates)
        critic_state = {f"feature.{k}": v for k, v in critics.feature_critic.state_dict().items()}
        if critics.mask_critic is not None:
            critic_state.update({f"mask.{k}": v for k, v in critics.mask_critic.state_dict().items()})
        save_checkpoint(out / "critics", critic_state,
                        {"kind": "critics", "clip_bound": critics.clip_bound,
                         "feature_taps": list(plan.feature_taps)})
        write_history_csv(history, out / "history.csv")
        net, eval_dom = RoutedSegmenter(model, dam, DomainRoute.TARGET), tgt_dom

    rows = evaluate_volumes(net, read_dataset(cfg.data_dir, eval_dom, "test"), net_cfg.input_size,
                            net_cfg.num_classes, cfg.postprocess)
    write_metrics_csv(rows, out / "metrics.csv")
    agg = summarize(rows, net_cfg.num_classes)
    summary.update({
        "eval_domain": eval_dom,
        "mean_dice": mean_foreground_dice(rows),
        "dice": format_mean_std(agg["dice"]["mean"]),
        "asd": format_mean_std(agg["asd"]["mean"]),
        "elapsed_s": round(time.perf_counter() - t0, 1),
    })
    _write_json(out / "summary.json", summary)
    log.info("%s %s: mean Dice %.1f", cfg.mode, cfg.direction, summary["mean_dice"])
    return out


# ---------------------------------------------------------------- ablations

@dataclass
class SweepSetting:
    label: str
    adapt_overrides: dict
    note: str = ""


def sweep_settings(ablation: dict) -> list[SweepSetting]:
    settings = []
    for r in ablation.get("mask_ratios", []):
        label = "solely feature critic (ratio 0)" if r == 0 else f"mask/feature ratio = {r:g}"
        settings.append(SweepSetting(label, {"mask_ratio": float(r)}))
    for t in ablation.get("remove_taps", []):
        note = "expected worst feature ablation" if t == "pre-softmax" else ""
        taps = [x for x in DEFAULT_TAPS if x != t]
        settings.append(SweepSetting(f"-- {t}", {"feature_taps": taps}, note))
    if ablation.get("include_mask_disabled"):
        settings.append(SweepSetting("mask critic disabled", {"use_mask_critic": False}))
    return settings


def ablation_sweep(cfg: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """One pnp-ada run per ablation setting; returns table rows and writes ``table.md``/``table.csv``."""
    if cfg.mode != "pnp-ada":
        cfg = dataclasses.replace(cfg, mode="pnp-ada")
    _load_source_run(cfg)   # fail early on a missing prerequisite
    out = Path(out_dir)
    settings = sweep_settings(cfg.ablation)
    if not settings:
        raise ConfigurationError("ablation settings select nothing")
    jobs_list = []
    for i, s in enumerate(settings):
        run_cfg = dataclasses.replace(cfg, adapt=_merge(cfg.adapt, s.adapt_overrides), ablation={})
        jobs_list.append((run_cfg, out / f"{i:02d}"))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            list(ex.map(run_experiment, *zip(*jobs_list)))
    else:
        for run_cfg, d in jobs_list:
            run_experiment(run_cfg, d)
    entries = [(s.label, d, s.note) for s, (_, d) in zip(settings, jobs_list)]
    num_classes = cfg.net_config().num_classes
    emit_table(entries, "markdown", out / "table.md", num_classes)
    emit_table(entries, "csv", out / "table.csv", num_classes)
    return [table_row(label, d, num_classes, note) for label, d, note in entries]


# ---------------------------------------------------------------- tables

def structure_names(num_classes: int) -> list[str]:
    n = num_classes - 1
    if n == len(STRUCTURES):
        return list(STRUCTURES)
    return [f"class {c}" for c in range(1, num_classes)]


def table_row(label: str, run_dir: str | Path, num_classes: int, note: str = "") -> dict:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise DependencyError(f"missing metrics for {label!r}: {path}")
    agg = summarize(read_metrics_csv(path), num_classes)
    cells = []
    for c in range(1, num_classes):
        cells += [format_mean_std(agg["dice"]["per_class"][c]), format_mean_std(agg["asd"]["per_class"][c])]
    if num_classes > 2:
        cells += [format_mean_std(agg["dice"]["mean"]), format_mean_std(agg["asd"]["mean"])]
    return {"label": label, "cells": cells, "note": note}


def _header(num_classes: int) -> list[str]:
    cols = []
    names = structure_names(num_classes)
    if num_classes > 2:
        names = names + ["Mean"]
    for n in names:
        cols += [f"{n} Dice", f"{n} ASD"]
    return cols


def emit_table(entries: Sequence, fmt: str, out_path: str | Path, num_classes: int = 5,
               references: bool = False) -> Path:
    """Render runs as a Dice/ASD table.

    ``entries`` holds ``(label, run_dir)`` or ``(label, run_dir, note)``.
    ``references=True`` appends the published full-scale rows.
    """
    if fmt not in ("markdown", "csv"):
        raise ArgumentError(f"format must be markdown or csv, got {fmt!r}")
    rows = []
    for e in entries:
        label, d, note = (tuple(e) + ("",))[:3]
        rows.append(table_row(label, d, num_classes, note))
    if references and num_classes == len(STRUCTURES) + 1:
        for label, ref in REFERENCE_ROWS.items():
            cells = [x for pair in zip(ref["dice"], ref["asd"]) for x in pair]
            rows.append({"label": label, "cells": cells, "note": "literature value on MM-WHS, not reproducible here"})
    header = ["Method"] + _header(num_classes)
    with_notes = any(r["note"] for r in rows)
    if with_notes:
        header.append("Note")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with out.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([r["label"], *r["cells"]] + ([r["note"]] if with_notes else []))
    else:
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for r in rows:
            cells = [r["label"], *r["cells"]] + ([r["note"]] if with_notes else [])
            lines.append("| " + " | ".join(cells) + " |")
        out.write_text("\n".join(lines) + "\n")
    return out


# ---------------------------------------------------------------- plots

def lr_series(history: Sequence[dict]) -> list[tuple[int, float]]:
    """(joint update index, lr) for every generator step."""
    out = []
    for row in history:
        if row["role"] == "generator":
            out.append((len(out) + 1, row["lr"]))
    return out


def plot_history(run_dir: str | Path) -> list[Path]:
    """Write ``loss.png`` and ``lr.png`` next to ``history.csv``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    path = run_dir / "history.csv"
    if not path.exists():
        raise DependencyError(f"no history at {path}")
    hist = read_history_csv(path)
    if not hist:
        raise ArgumentError(f"{path} is empty")
    meta = {"Software": None}

    fig, ax = plt.subplots(figsize=(7, 4))
    for role, key, lab in (("critic", "loss_f", "feature critic"), ("critic", "loss_m", "mask critic"),
                           ("generator", "loss_f", "generator (feature term)"),
                           ("generator", "loss_m", "generator (mask term)")):
        pts = [(r["iteration"], r[key]) for r in hist if r["role"] == role and r[key] is not None]
        if pts:
            ax.plot(*zip(*pts), lw=0.8, label=lab)
    ax.set_xlabel("iteration")
    ax.set_ylabel("scaled loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    loss_png = run_dir / "loss.png"
    fig.savefig(loss_png, metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 3))
    series = lr_series(hist)
    if series:
        ax.step(*zip(*series), where="post")
    ax.set_xlabel("joint update")
    ax.set_ylabel("learning rate")
    fig.tight_layout()
    lr_png = run_dir / "lr.png"
    fig.savefig(lr_png, metadata=meta)
    plt.close(fig)
    return [loss_png, lr_png]


__all__ = [
    "DESK_PRESET", "ExperimentConfig", "MODES", "FULL_PRESET", "REFERENCE_ROWS", "ablation_sweep",
    "emit_table", "evaluate_volumes", "lr_at", "lr_series", "plot_history", "run_experiment",
    "sweep_settings", "table_row",
]
