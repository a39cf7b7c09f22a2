"""Command line interface.

Settings are layered: built-in preset, then an optional TOML file
(``--config``), then flags.  TOML schema::

    [experiment]   preset, seed, direction, depth, postprocess
    [network]      NetworkConfig fields
    [train]        TrainConfig fields (seed comes from [experiment])
    [adapt]        AdaptConfig fields
    [augment]      AugmentConfig fields
    [ablation]     mask_ratios, remove_taps, include_mask_disabled

``--set section.key=value`` overrides a single value; ``value`` is parsed as
a TOML value, so ``--set adapt.joint_updates=50`` and
``--set adapt.feature_taps='["RM6","pre-softmax"]'`` both work.

Failures exit nonzero and print one JSON object on stderr:
``{"error": <kind>, "message": <text>, "exit_code": <n>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .bench import (DESK_PRESET, FULL_PRESET, ExperimentConfig, _merge, ablation_sweep, emit_table,
                    plot_history, run_experiment)
from .data import PhantomConfig, gen_phantom, write_dataset
from .errors import ArgumentError, ConfigurationError, DependencyError, FormatError, PnPError

PRESETS = {"desk": DESK_PRESET, "full": FULL_PRESET}
SECTIONS = ("experiment", "network", "train", "adapt", "augment", "ablation")
EXIT_CODES = {ConfigurationError: 2, ArgumentError: 2, DependencyError: 3, FormatError: 4}


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_settings(config: str | None, overrides: list[str]) -> dict:
    settings: dict = {s: {} for s in SECTIONS}
    if config:
        path = Path(config)
        if not path.exists():
            raise DependencyError(f"config file {config!r} not found")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise FormatError(f"{config}: {e}") from e
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"{config}: unknown sections {sorted(unknown)}")
        settings = _merge(settings, data)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS or not name:
            raise ArgumentError(f"--set expects section.key=value with section in {SECTIONS}, got {item!r}")
        settings[section][name] = _parse_value(value)
    return settings


def build_config(args, mode: str) -> ExperimentConfig:
    s = load_settings(args.config, args.set or [])
    exp = dict(s["experiment"])
    for flag in ("seed", "direction", "depth", "preset"):
        v = getattr(args, flag, None)
        if v is not None:
            exp[flag] = v
    if getattr(args, "postprocess", False):
        exp["postprocess"] = True
    preset_name = exp.pop("preset", "desk")
    if preset_name not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[preset_name]
    return ExperimentConfig(
        mode=mode,
        data_dir=args.data,
        source_run=getattr(args, "source_run", None),
        network=_merge(preset["network"], s["network"]),
        train=_merge(preset["train"], s["train"]),
        adapt=_merge(preset["adapt"], s["adapt"]),
        augment=s["augment"],
        ablation=s["ablation"],
        **exp,
    )


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _summary(run_dir: Path) -> dict:
    return json.loads((run_dir / "summary.json").read_text())


def cmd_gen_data(args):
    cfg = PhantomConfig(size=args.size, n_train=args.n_train, n_test=args.n_test, noise=args.noise,
                        zoom=args.zoom)
    mods = tuple(args.modalities.split(","))
    if len(mods) != 2:
        raise ArgumentError("--modalities expects two comma-separated names")
    splits = gen_phantom(cfg, args.seed, mods)
    path = write_dataset(dict(zip(mods, splits)), args.out,
                         {"seed": args.seed, "size": cfg.size, "n_train": cfg.n_train,
                          "n_test": cfg.n_test, "noise": cfg.noise, "zoom": cfg.zoom})
    _print({"dataset": str(path)})


def cmd_train_source(args):
    mode = "seg-target" if args.target else "seg-source"
    _print(_summary(run_experiment(build_config(args, mode), args.out)))


def cmd_adapt(args):
    _print(_summary(run_experiment(build_config(args, "pnp-ada"), args.out)))


def cmd_evaluate(args):
    _print(_summary(run_experiment(build_config(args, "no-da"), args.out)))


def cmd_sweep(args):
    cfg = build_config(args, "pnp-ada")
    abl = dict(cfg.ablation)
    if args.ratios is not None:
        abl["mask_ratios"] = [float(r) for r in args.ratios.split(",") if r]
    if args.remove_taps is not None:
        abl["remove_taps"] = [t for t in args.remove_taps.split(",") if t]
    if args.include_mask_disabled:
        abl["include_mask_disabled"] = True
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "ablation": abl})
    rows = ablation_sweep(cfg, args.out, jobs=args.jobs)
    _print({"table": str(Path(args.out) / "table.md"), "rows": rows})


def cmd_table(args):
    entries = []
    for item in args.runs:
        label, sep, d = item.partition("=")
        entries.append((label, d) if sep else (Path(item).name, item))
    path = emit_table(entries, args.format, args.out, args.num_classes, args.references)
    _print({"table": str(path)})


def cmd_plot(args):
    _print({"images": [str(p) for p in plot_history(args.run)]})


def _experiment_flags(p, source_run: bool):
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory to create")
    if source_run:
        p.add_argument("--source-run", required=True, help="seg-source run directory")
    p.add_argument("--config", help="TOML settings file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--direction", help="source->target, e.g. A->B or B->A")
    p.add_argument("--depth", help="adaptation depth (last layer replaced)")
    p.add_argument("--postprocess", action="store_true", help="keep the largest 3D component per class")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnpseg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the two-modality phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--zoom", type=float, default=1.25, help="field-of-view crop factor about the centre")
    p.add_argument("--modalities", default="A,B")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="supervised training on the source domain")
    _experiment_flags(p, source_run=False)
    p.add_argument("--target", action="store_true",
                   help="train on the labelled target domain instead (upper bound)")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="plug-and-play adaptation of a seg-source run")
    _experiment_flags(p, source_run=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="test a seg-source run on the target domain without adaptation")
    _experiment_flags(p, source_run=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="ablation sweep over mask ratios and removed taps")
    _experiment_flags(p, source_run=True)
    p.add_argument("--ratios", help="comma-separated mask/feature ratios from {0, 0.1, ..., 0.7}")
    p.add_argument("--remove-taps", help="comma-separated taps to drop one at a time")
    p.add_argument("--include-mask-disabled", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("table", help="render run directories as a Dice/ASD table")
    p.add_argument("runs", nargs="+", metavar="[LABEL=]RUN_DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--references", action="store_true", help="append published reference rows")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("plot", help="loss and learning-rate curves of an adapt run")
    p.add_argument("run")
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            return 0
        return _fail("usage", "invalid command line, see --help", 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PnPError as e:
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(e, cls)), 1)
        return _fail(e.kind, str(e), code)
    except (ValueError, TypeError) as e:
        return _fail("configuration", str(e), 2)
    except Exception as e:  # noqa: BLE001 - reported as JSON, not a traceback
        return _fail("internal", f"{type(e).__name__}: {e}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
