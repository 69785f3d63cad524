"""Command-line interface.

Subcommands: schedule, degrade, train, restore, eval. Configuration layers
as defaults < config file < flags; the config file is INI-style with one
section per subcommand and keys named after the long flags. Exit codes:
0 success, 2 usage error, 3 I/O error, 4 numeric failure. Every run with a
fixed --seed is reproducible in all written artifacts, independent of
--threads.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

from . import __version__, dataio, degrade, metrics, plots
from .dataio import CheckpointError, UnsupportedImageError
from .denoiser import DenoiserConfig, PromptDenoiser
from .rng import numpy_generator, spawn_seed
from .sampler import restore
from .schedule import NoiseSchedule, make_linear_schedule, schedule_rows
from .trainer import NumericError, TrainConfig, TrainingRun

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


# (type converter, default) per option, per subcommand; used both for the
# config-file layer and for argparse defaults.
_OPTION_TYPES = {
    "schedule": {
        "T": (int, 1000), "beta_start": (float, 1e-4), "beta_end": (float, 0.02),
        "no_figure": (_parse_bool, False),
    },
    "degrade": {
        "task": (str, "noise"), "sigma": (float, 25.0),
        "streaks": (int, 80), "angle": (float, 10.0), "length": (int, 24),
        "streak_intensity": (float, 0.8),
        "attenuation": (_parse_triple, (0.55, 0.85, 0.95)),
        "veil_color": (_parse_triple, (20.0, 80.0, 100.0)),
        "veil_strength": (float, 0.25),
        "seed": (int, 0), "threads": (int, 1),
    },
    "train": {
        "steps": (int, 1000), "batch_size": (int, 32), "lr": (float, 2e-4),
        "patch_size": (int, 128), "freeze_encoder": (_parse_bool, False),
        "seed": (int, 0), "checkpoint_every": (int, 500),
        "T": (int, 1000), "beta_start": (float, 1e-4), "beta_end": (float, 0.02),
        "base_channels": (int, 48), "blocks": (_parse_ints, (4, 6, 6, 8)),
        "heads": (_parse_ints, (1, 2, 4, 8)),
        "multipliers": (_parse_ints, (1, 2, 4, 8)),
        "prompt_components": (int, 5),
        "prompt_spatial": (_parse_ints, (64, 32, 16)),
        "timestep_dim": (int, 128),
        "no_figure": (_parse_bool, False), "threads": (int, 1),
    },
    "restore": {
        "tile": (int, 128), "overlap": (int, 16), "timestep_stride": (int, 1),
        "seed": (int, 0), "threads": (int, 1),
    },
    "eval": {
        "no_figure": (_parse_bool, False), "threads": (int, 1),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffrestore",
        description="Conditional-diffusion image restoration toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, helptext):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="INI config file (section [%s])" % name)
        for dest in _OPTION_TYPES[name]:
            flag = "--" + dest.replace("_", "-")
            conv = _OPTION_TYPES[name][dest][0]
            if conv is _parse_bool:
                p.add_argument(flag, dest=dest, action="store_true", default=None)
            else:
                p.add_argument(flag, dest=dest, type=conv, default=None)
        return p

    p = add("schedule", "inspect a noise schedule (CSV + figure)")
    p.add_argument("--out", required=True, help="output CSV path")

    p = add("degrade", "synthesize degraded copies of clean images")
    p.add_argument("--input", required=True, help="directory of clean PNGs")
    p.add_argument("--out", required=True, help="output root (clean/ + degraded/)")

    p = add("train", "train the denoiser on a paired directory tree")
    p.add_argument("--data", required=True, help="root with clean/ and degraded/")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = add("restore", "restore degraded images with a trained model")
    p.add_argument("--ckpt", required=True, help="trained checkpoint (.tdir)")
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", "compute quality metrics over image pairs")
    p.add_argument("--pairs", help="root with clean/ and degraded/")
    p.add_argument("--clean", help="reference image directory")
    p.add_argument("--degraded", help="test image directory")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


def _merge_options(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    spec = _OPTION_TYPES[args.command]
    merged = {dest: default for dest, (_, default) in spec.items()}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        ini = configparser.ConfigParser()
        ini.optionxform = str  # keys are case-sensitive (e.g. T)
        try:
            ini.read_string(cfg_path.read_text())
        except configparser.Error as e:
            raise ValueError(f"config parse failure: {e}") from e
        if ini.has_section(args.command):
            for key, raw in ini.items(args.command):
                if key not in spec:
                    raise ValueError(
                        f"unknown config key {key!r} in section [{args.command}]"
                    )
                merged[key] = spec[key][0](raw)
    for dest in spec:
        value = getattr(args, dest, None)
        if value is not None:
            merged[dest] = value
    for key, value in vars(args).items():
        if key not in merged and key not in ("config", "command"):
            merged[key] = value
    return merged


def _float_cell(x: float) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_schedule(opt: dict) -> int:
    sched = make_linear_schedule(opt["T"], opt["beta_start"], opt["beta_end"])
    out = Path(opt["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        (t, *(map(_float_cell, vals)))
        for t, *vals in schedule_rows(sched)
    ]
    _write_csv(
        out,
        ["t", "beta", "alpha", "alpha_bar", "sqrt_alpha_bar",
         "sqrt_one_minus_alpha_bar"],
        rows,
    )
    if not opt["no_figure"]:
        plots.save_schedule_figure(sched, out.with_suffix(".png"))
    return 0


def _list_pngs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = sorted(directory.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {directory}")
    return files


def cmd_degrade(opt: dict) -> int:
    files = _list_pngs(Path(opt["input"]))
    out_root = Path(opt["out"])
    clean_dir = out_root / "clean"
    degraded_dir = out_root / "degraded"
    clean_dir.mkdir(parents=True, exist_ok=True)
    degraded_dir.mkdir(parents=True, exist_ok=True)
    task = opt["task"]
    if task not in ("noise", "rain", "underwater"):
        raise ValueError(f"unknown degradation task {task!r}")

    def job(index: int) -> None:
        path = files[index]
        img = dataio.load_image(path)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        img8 = img * 255.0
        rng = numpy_generator(opt["seed"], index)
        if task == "noise":
            out8 = degrade.add_gaussian_noise(img8, opt["sigma"], rng)
        elif task == "rain":
            out8 = degrade.synth_rain(
                img8, opt["streaks"], opt["angle"], opt["length"],
                opt["streak_intensity"], rng,
            )
        else:
            out8 = degrade.synth_underwater(
                img8, opt["attenuation"], opt["veil_color"], opt["veil_strength"]
            )
        dataio.save_image(img, clean_dir / path.name)
        dataio.save_image(out8 / 255.0, degraded_dir / path.name)

    _run_jobs(job, len(files), opt["threads"])
    return 0


def _run_jobs(job, n: int, threads: int) -> list:
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, range(n)))
    return [job(i) for i in range(n)]


def cmd_train(opt: dict) -> int:
    out_dir = Path(opt["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    dcfg = DenoiserConfig(
        base_channels=opt["base_channels"],
        channel_multipliers=tuple(opt["multipliers"]),
        heads=tuple(opt["heads"]),
        blocks=tuple(opt["blocks"]),
        prompt_components=opt["prompt_components"],
        prompt_spatial=tuple(opt["prompt_spatial"]),
        timestep_embed_dim=opt["timestep_dim"],
    )
    tcfg = TrainConfig(
        batch_size=opt["batch_size"],
        learning_rate=opt["lr"],
        total_steps=opt["steps"],
        patch_size=opt["patch_size"],
        freeze_encoder=opt["freeze_encoder"],
        seed=opt["seed"],
        checkpoint_every=opt["checkpoint_every"],
    )
    if tcfg.patch_size % dcfg.downsample_factor:
        raise ValueError(
            f"patch_size must be divisible by {dcfg.downsample_factor}"
        )
    sched = make_linear_schedule(opt["T"], opt["beta_start"], opt["beta_end"])
    resume = dataio.load_checkpoint(opt["resume"]) if opt.get("resume") else None
    run = TrainingRun(opt["data"], dcfg, tcfg, sched, resume=resume)
    run.run(out_dir=out_dir)
    _write_csv(
        out_dir / "log.csv",
        ["step", "loss", "lr", "wall_ms"],
        [
            (step, _float_cell(loss), _float_cell(lr), f"{ms:.3f}")
            for step, loss, lr, ms in run.log_rows
        ],
    )
    if run.log_rows and not opt["no_figure"]:
        plots.save_loss_figure(
            [r[0] for r in run.log_rows],
            [r[1] for r in run.log_rows],
            out_dir / "loss_curve.png",
        )
    return 0


def _model_from_checkpoint(ckpt: dataio.Checkpoint) -> tuple[PromptDenoiser, NoiseSchedule]:
    dcfg = DenoiserConfig.from_dict(ckpt.denoiser_config)
    model = PromptDenoiser(dcfg)
    with torch.no_grad():
        for name, p in model.parameter_tensors().items():
            if name not in ckpt.params:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            if tuple(ckpt.params[name].shape) != tuple(p.shape):
                raise CheckpointError(f"checkpoint tensor {name!r} has wrong shape")
            p.copy_(ckpt.params[name])
    if ckpt.schedule_betas is None:
        raise CheckpointError("checkpoint does not carry a noise schedule")
    return model, NoiseSchedule(np.asarray(ckpt.schedule_betas, dtype=np.float64))


def cmd_restore(opt: dict) -> int:
    ckpt = dataio.load_checkpoint(opt["ckpt"])
    model, sched = _model_from_checkpoint(ckpt)
    model.eval()
    in_path = Path(opt["input"])
    files = _list_pngs(in_path) if in_path.is_dir() else [in_path]
    out_dir = Path(opt["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, path in enumerate(sorted(files)):
        img = dataio.load_image(path)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        result = restore(
            torch.from_numpy(img).float(),
            model,
            sched,
            seed=spawn_seed(opt["seed"], index),
            tile=opt["tile"],
            overlap=opt["overlap"],
            timestep_stride=opt["timestep_stride"],
            threads=opt["threads"],
        )
        dataio.save_image(result.numpy(), out_dir / path.name)
    return 0


def cmd_eval(opt: dict) -> int:
    if opt.get("pairs"):
        clean_dir = Path(opt["pairs"]) / "clean"
        degraded_dir = Path(opt["pairs"]) / "degraded"
    elif opt.get("clean") and opt.get("degraded"):
        clean_dir, degraded_dir = Path(opt["clean"]), Path(opt["degraded"])
    else:
        raise ValueError("eval needs --pairs ROOT or both --clean and --degraded")
    manifest = dataio.build_manifest(clean_dir, degraded_dir)

    def job(index: int) -> metrics.MetricReport:
        clean_path, degraded_path = manifest.pairs[index]
        return metrics.evaluate_pair(
            dataio.load_image(clean_path), dataio.load_image(degraded_path)
        )

    reports = _run_jobs(job, len(manifest.pairs), opt["threads"])
    names = [c.name for c, _ in manifest.pairs]
    columns = [
        "psnr", "ssim", "uicm", "uism", "uiconm", "uiqm",
        "uciqe", "sigma_chroma", "contrast_l", "mean_saturation",
    ]
    rows = [
        (name, *(_float_cell(getattr(r, col)) for col in columns))
        for name, r in zip(names, reports)
    ]
    means = (
        "mean",
        *(
            _float_cell(float(np.mean([getattr(r, col) for r in reports])))
            for col in columns
        ),
    )
    out = Path(opt["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["filename", *columns], [*rows, means])
    if not opt["no_figure"]:
        plots.save_metrics_figure(names, reports, out.with_suffix(".png"))
    return 0


_RUNNERS = {
    "schedule": cmd_schedule,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "restore": cmd_restore,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        opt = _merge_options(args)
        return _RUNNERS[args.command](opt)
    except (NumericError, FloatingPointError) as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, OSError, UnsupportedImageError, CheckpointError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError) as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
