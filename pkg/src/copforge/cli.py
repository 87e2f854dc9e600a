"""Command-line entry point.

One binary, subcommand style::

    copforge synth      generate synthetic recordings
    copforge convert    kinematics source files -> canonical recordings
    copforge train      fit a model and save it
    copforge eval       intra-subject evaluation (or evaluate a saved model)
    copforge ablate     sensor-placement sweep over all 127 subsets
    copforge traincurve test error vs train-set size
    copforge transfer   cross-subject transfer with standing calibration
    copforge gaitogram  export the COP butterfly as CSV + SVG

Every run writes its fully resolved configuration to ``<out>/config.json``;
identical flags and seed reproduce every output byte for byte. Exit codes:
0 success, 1 computation error, 2 flag misuse. Set ``COPFORGE_LOG`` to
``error``/``info``/``debug`` to control logging.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .convert import convert_and_save
from .core import (
    ConfigInvalid,
    Constellation,
    CopforgeError,
    ProtocolStep,
    SpecTooLarge,
    validate,
)
from .dataio import ChannelSelection, load_recording, save_recording
from .experiments import (
    apply_model,
    ensure_pelvis,
    export_gaitogram,
    rms_error,
    run_ablation,
    run_intra_subject,
    run_train_size_curve,
    run_transfer,
    write_ablation_report,
    write_eval_report,
    write_traincurve_report,
    write_transfer_report,
)
from .kinematics import load_alignment
from .models import load_model, save_model
from .synthgait import SynthGaitConfig, generate_cohort, generate_recording

log = logging.getLogger("copforge")


def _setup_logging() -> None:
    level = os.environ.get("COPFORGE_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s"
    )


def _write_config(out_dir: Path, args: argparse.Namespace) -> None:
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    resolved["version"] = __version__
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _parse_protocol(text: str) -> tuple[ProtocolStep, ...]:
    steps = []
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 3:
            raise ConfigInvalid(f"bad protocol step {part!r}; expected speed:pert:duration")
        steps.append(ProtocolStep(float(fields[0]), float(fields[1]), float(fields[2])))
    return tuple(steps)


def _load_synth_config_file(path: Path) -> dict:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{path}:{lineno}: expected key=value")
        key, value = (tok.strip() for tok in line.split("=", 1))
        values[key] = value
    return values


def _channels(args: argparse.Namespace) -> ChannelSelection:
    return ChannelSelection(args.channels, args.history)


def _constellation(args: argparse.Namespace) -> Constellation | None:
    return Constellation.from_string(args.imus) if args.imus else None


def _model_params(args: argparse.Namespace) -> dict:
    params: dict[str, object] = {}
    if args.model == "lstm":
        for flag, key in (
            ("units", "units"),
            ("window", "window"),
            ("epochs", "max_epochs"),
            ("batch_size", "batch_size"),
            ("patience", "patience"),
        ):
            value = getattr(args, flag, None)
            if value is not None:
                params[key] = value
    elif getattr(args, "ridge", None) is not None:
        params["ridge"] = args.ridge
    return params


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    overrides: dict[str, object] = {}
    if args.config:
        raw = _load_synth_config_file(Path(args.config))
        casts = {
            "duration": ("duration_s", float),
            "cadence": ("cadence_hz", float),
            "speed": ("speed_mps", float),
            "scale": ("subject_scale", float),
            "asymmetry": ("asymmetry", float),
            "noise_frac": ("noise_frac", float),
            "pelvis_coupling": ("pelvis_coupling", float),
            "seed": ("seed", int),
            "protocol": ("protocol_steps", _parse_protocol),
        }
        for key, value in raw.items():
            if key not in casts:
                raise ConfigInvalid(f"unknown synth config key {key!r}")
            field, cast = casts[key]
            overrides[field] = cast(value)

    flag_overrides = {
        "duration_s": args.duration,
        "cadence_hz": args.cadence,
        "speed_mps": args.speed,
        "subject_scale": args.scale,
        "asymmetry": args.asymmetry,
        "noise_frac": args.noise_frac,
        "pelvis_coupling": args.pelvis_coupling,
        "seed": args.seed,
    }
    overrides.update({k: v for k, v in flag_overrides.items() if v is not None})
    if args.protocol:
        overrides["protocol_steps"] = _parse_protocol(args.protocol)

    cfg = dataclasses.replace(
        SynthGaitConfig(subject_id=f"subject_seed{overrides.get('seed', 0)}"), **overrides
    )
    if args.cohort:
        recordings = generate_cohort(args.cohort, cfg, seed=cfg.seed, n_patients=args.patients)
    else:
        recordings = [generate_recording(cfg)]
    for rec in recordings:
        path = save_recording(rec, out_dir / f"{rec.manifest.subject_id}.csv")
        problems = validate(rec)
        assert not problems, problems
        print(
            f"wrote {path} ({len(rec)} samples, {rec.duration_s():.1f} s, "
            f"noise {cfg.noise_frac:.3f})"
        )
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    alignment = load_alignment(args.alignment) if args.alignment else None
    path = convert_and_save(args.input, out_dir, alignment, name=args.name)
    rec = load_recording(path)
    print(f"wrote {path} ({len(rec)} samples, COP frame {rec.cop.frame.value})")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    recording = load_recording(args.input)
    result = run_intra_subject(
        recording,
        model_kind=args.model,
        channels=_channels(args),
        constellation=_constellation(args),
        train_fraction=args.train_fraction,
        seed=args.seed,
        model_params=_model_params(args),
    )
    model_path = save_model(result.model, out_dir / "model.json")
    write_eval_report(result, out_dir)
    print(
        f"trained {args.model} on {result.subject_id}: train MSE "
        f"{result.train_mse:.4f} mm^2, held-out total RMS {result.report.total:.3f} mm"
    )
    print(f"wrote {model_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    recording = load_recording(args.input)
    if args.model_file:
        model = load_model(args.model_file)
        pred, targets = apply_model(model, recording)
        report = rms_error(pred, targets.Y)
        (out_dir / "eval_report.json").parent.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval_report.json").write_text(
            json.dumps(
                {
                    "subject": recording.manifest.subject_id,
                    "model_file": str(args.model_file),
                    "rms": report.as_dict(),
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
    else:
        result = run_intra_subject(
            recording,
            model_kind=args.model,
            channels=_channels(args),
            constellation=_constellation(args),
            train_fraction=args.train_fraction,
            seed=args.seed,
            model_params=_model_params(args),
        )
        report = result.report
        write_eval_report(result, out_dir)
    print(
        f"total RMS {report.total:.3f} mm (lateral {report.lateral:.3f}, "
        f"anterior {report.anterior:.3f})"
    )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    recording = load_recording(args.input)
    result = run_ablation(
        recording,
        model_kind=args.model,
        channels=_channels(args),
        train_fraction=args.train_fraction,
        seed=args.seed,
        model_params=_model_params(args),
        jobs=args.jobs,
    )
    write_ablation_report(result, out_dir)
    print(f"evaluated {len(result.scores)} constellations")
    for count, best, worst in result.best_worst_by_count():
        print(
            f"  {count} IMU(s): best {best.to_string()} "
            f"({result.scores[best].report.total:.3f} mm), worst {worst.to_string()} "
            f"({result.scores[worst].report.total:.3f} mm)"
        )
    return 0


def cmd_traincurve(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    recording = load_recording(args.input)
    sizes = [float(tok) for tok in args.sizes.split(",")]
    curve = run_train_size_curve(
        recording,
        sizes,
        repeats=args.repeats,
        seed=args.seed,
        model_kind=args.model,
        channels=_channels(args),
        model_params=_model_params(args),
        jobs=args.jobs,
    )
    write_traincurve_report(curve, out_dir)
    for size, mean, std in zip(curve.sizes_s, curve.mean_total(), curve.std_total()):
        print(f"  {size:7.1f} s: total RMS {mean:.3f} +- {std:.3f} mm")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    paths: list[Path] = []
    for item in args.input:
        p = Path(item)
        paths.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    recordings = [load_recording(p) for p in paths]
    targets = args.target.split(",") if args.target else [
        r.manifest.subject_id for r in recordings
    ]
    results = []
    for target in targets:
        res = run_transfer(
            recordings,
            target,
            calib_seconds=args.calib_seconds,
            model_kind=args.model,
            channels=_channels(args),
            seed=args.seed,
            model_params=_model_params(args),
        )
        results.append(res)
        print(
            f"  target {target}: A {res.rms_uncalibrated.total:.3f} mm -> "
            f"B {res.rms_calibrated.total:.3f} mm"
        )
    write_transfer_report(results, out_dir)
    return 0


def cmd_gaitogram(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    _write_config(out_dir, args)
    recording = ensure_pelvis(load_recording(args.input))
    pred = None
    truth = recording.cop.xy
    if args.model_file:
        model = load_model(args.model_file)
        pred, targets = apply_model(model, recording)
        truth = targets.Y
    csv_path, svg_path = export_gaitogram(
        truth, out_dir / "gaitogram", pred_xy=pred,
        title=f"Gaitogram {recording.manifest.subject_id}",
    )
    print(f"wrote {csv_path} and {svg_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_io(p: argparse.ArgumentParser, multi_input: bool = False) -> None:
    if multi_input:
        p.add_argument("--input", "-i", nargs="+", required=True,
                       help="recording CSV files or a directory of them")
    else:
        p.add_argument("--input", "-i", required=True, help="recording CSV file")
    p.add_argument("--output", "-o", required=True, help="output directory")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=["linear", "linear-gd", "lstm"], default="linear")
    p.add_argument("--channels", choices=["gam", "ga"], default="gam")
    p.add_argument("--history", type=int, default=0, help="past lags per channel")
    p.add_argument("--imus", default=None, help="constellation, e.g. 2,3,6 (default all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--ridge", type=float, default=None, help="linear ridge strength")
    p.add_argument("--units", type=int, default=None, help="LSTM hidden units")
    p.add_argument("--window", type=int, default=None, help="LSTM window length (samples)")
    p.add_argument("--epochs", type=int, default=None, help="LSTM max epochs")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copforge",
        description="Centre-of-pressure estimation from wearable IMU signals.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic recordings")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--speed", type=float, default=None, help="reference speed m/s")
    p.add_argument("--cadence", type=float, default=None, help="steps per second")
    p.add_argument("--scale", type=float, default=None, help="subject limb-amplitude scale")
    p.add_argument("--asymmetry", type=float, default=None, help="left/right skew in [0,1]")
    p.add_argument("--noise-frac", type=float, default=None)
    p.add_argument("--pelvis-coupling", type=float, default=None,
                   help="fraction of trunk motion driven directly by the COP")
    p.add_argument("--protocol", default=None, help="speed:pert:duration,... steps")
    p.add_argument("--cohort", type=int, default=None, help="generate N subjects")
    p.add_argument("--patients", type=int, default=0, help="patient-like subjects in cohort")
    p.add_argument("--config", default=None, help="key=value config file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert kinematics source files")
    _add_io(p)
    p.add_argument("--alignment", default=None, help="sensor alignment file")
    p.add_argument("--name", default=None, help="output recording name")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="fit a model and save it")
    _add_io(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="intra-subject evaluation")
    _add_io(p)
    _add_model_flags(p)
    p.add_argument("--model-file", default=None, help="evaluate a saved model instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sensor placement sweep (127 subsets)")
    _add_io(p)
    _add_model_flags(p)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("traincurve", help="test error vs train-set size")
    _add_io(p)
    _add_model_flags(p)
    p.add_argument("--sizes", default="10,30,100,300", help="comma-separated seconds")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_traincurve)

    p = sub.add_parser("transfer", help="cross-subject transfer + calibration")
    _add_io(p, multi_input=True)
    _add_model_flags(p)
    p.add_argument("--target", default=None,
                   help="target subject id(s), comma separated (default: all)")
    p.add_argument("--calib-seconds", type=float, default=30.0)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("gaitogram", help="export the COP trace as CSV + SVG")
    _add_io(p)
    p.add_argument("--model-file", default=None, help="overlay saved-model predictions")
    p.set_defaults(func=cmd_gaitogram)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, SpecTooLarge) as exc:
        # bad flag values or out-of-range run configuration
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CopforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
