"""Recording file formats, trigger synchronization, train/test splitting,
and feature/target matrix assembly.

A recording on disk is one flat CSV (``t, imu{n}_{g|a|m}_{x|y|z}, cop_x,
cop_y, pelvis_x, pelvis_y, sync, step``) plus a JSON manifest sidecar named
``<stem>.manifest.json`` that declares the subject, protocol, sensors,
per-column units, and the COP frame. All numbers are serialized with 10
significant digits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .core import (
    ClockSkew,
    Constellation,
    CopFrame,
    CopSeries,
    GamSeries,
    GRAVITY_MS2,
    Manifest,
    ManifestMismatch,
    MissingSensor,
    NoTrigger,
    ParseError,
    ProtocolStep,
    Recording,
    SensorId,
    Source,
    SpecTooLarge,
    UnitError,
    WrongFrame,
    validate,
)

_KIND_LETTERS = "gam"
_AXES = "xyz"

CANONICAL_UNITS = {
    "t": "s",
    "gyro": "rad/s",
    "accel": "m/s2",
    "mag": "unit",
    "cop": "mm",
    "pelvis": "mm",
}

_UNIT_FACTORS = {
    "t": {"s": 1.0, "ms": 1e-3},
    "gyro": {"rad/s": 1.0, "deg/s": np.pi / 180.0},
    "accel": {"m/s2": 1.0, "g": GRAVITY_MS2},
    "mag": {"unit": 1.0, "au": 1.0},
    "cop": {"mm": 1.0, "cm": 10.0, "m": 1000.0},
    "pelvis": {"mm": 1.0, "cm": 10.0, "m": 1000.0},
}


def _unit_factor(group: str, tag: str) -> float:
    try:
        return _UNIT_FACTORS[group][tag]
    except KeyError:
        raise UnitError(f"unknown unit {tag!r} for {group}") from None


def imu_column(sensor: SensorId | int, kind: str, axis: str) -> str:
    return f"imu{int(sensor)}_{kind}_{axis}"


def manifest_path_for(csv_path: Path | str) -> Path:
    return Path(csv_path).with_suffix(".manifest.json")


# ---------------------------------------------------------------------------
# Save / load
# ---------------------------------------------------------------------------

def save_recording(recording: Recording, csv_path: Path | str) -> Path:
    """Write the CSV + manifest pair; returns the CSV path."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)

    data: dict[str, np.ndarray] = {"t": recording.t}
    for sensor in sorted(recording.imu):
        series = recording.imu[sensor]
        for kind, arr in (("g", series.gyro), ("a", series.accel), ("m", series.mag)):
            for j, axis in enumerate(_AXES):
                data[imu_column(sensor, kind, axis)] = arr[:, j]
    data["cop_x"] = recording.cop.xy[:, 0]
    data["cop_y"] = recording.cop.xy[:, 1]
    data["pelvis_x"] = recording.pelvis_xy[:, 0]
    data["pelvis_y"] = recording.pelvis_xy[:, 1]
    data["sync"] = recording.sync
    data["step"] = recording.step_label

    frame = pd.DataFrame(data)
    frame["step"] = frame["step"].astype(int)
    frame.to_csv(csv_path, index=False, float_format="%.10g", lineterminator="\n")

    m = recording.manifest
    manifest = {
        "subject_id": m.subject_id,
        "mass_kg": m.mass_kg,
        "height_cm": m.height_cm,
        "sample_rate_hz": m.sample_rate_hz,
        "protocol_steps": [
            {
                "speed_mps": s.speed_mps,
                "perturbation_pct_bw": s.perturbation_pct_bw,
                "duration_s": s.duration_s,
            }
            for s in m.protocol_steps
        ],
        "source": m.source.value,
        "sensors": [int(s) for s in sorted(recording.imu)],
        "cop_frame": recording.cop.frame.value,
        "units": dict(CANONICAL_UNITS),
    }
    manifest_path_for(csv_path).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return csv_path


def load_recording(csv_path: Path | str) -> Recording:
    """Load and validate a recording, converting units to canonical on read."""
    csv_path = Path(csv_path)
    mpath = manifest_path_for(csv_path)
    if not csv_path.exists():
        raise ParseError(f"recording file not found: {csv_path}")
    if not mpath.exists():
        raise ParseError(f"manifest sidecar not found: {mpath}")

    try:
        meta = json.loads(mpath.read_text(encoding="utf-8"))
        manifest = Manifest(
            subject_id=str(meta["subject_id"]),
            mass_kg=float(meta["mass_kg"]),
            height_cm=float(meta["height_cm"]),
            sample_rate_hz=float(meta["sample_rate_hz"]),
            protocol_steps=tuple(
                ProtocolStep(
                    float(s["speed_mps"]),
                    float(s["perturbation_pct_bw"]),
                    float(s["duration_s"]),
                )
                for s in meta["protocol_steps"]
            ),
            source=Source(meta["source"]),
        )
        sensors = [SensorId(int(s)) for s in meta["sensors"]]
        frame = CopFrame(meta["cop_frame"])
        units = dict(meta.get("units", CANONICAL_UNITS))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad manifest {mpath}: {exc}") from exc

    try:
        table = pd.read_csv(csv_path)
    except Exception as exc:
        raise ParseError(f"cannot parse {csv_path}: {exc}") from exc

    expected = {"t", "cop_x", "cop_y", "pelvis_x", "pelvis_y", "sync", "step"}
    missing = expected - set(table.columns)
    if missing:
        raise ParseError(f"{csv_path}: missing columns {sorted(missing)}")

    imu_cols = {
        c for c in table.columns if c.startswith("imu") and c not in expected
    }
    declared_cols = {
        imu_column(s, k, ax) for s in sensors for k in _KIND_LETTERS for ax in _AXES
    }
    if declared_cols - imu_cols:
        raise ManifestMismatch(
            f"{csv_path}: manifest declares sensors {[int(s) for s in sensors]} but "
            f"columns {sorted(declared_cols - imu_cols)} are absent"
        )
    if imu_cols - declared_cols:
        raise ManifestMismatch(
            f"{csv_path}: undeclared imu columns {sorted(imu_cols - declared_cols)}"
        )

    t = table["t"].to_numpy(dtype=float) * _unit_factor("t", units.get("t", "s"))
    imu: dict[SensorId, GamSeries] = {}
    for sensor in sensors:
        arrays = {}
        for kind, group in (("g", "gyro"), ("a", "accel"), ("m", "mag")):
            factor = _unit_factor(group, units.get(group, CANONICAL_UNITS[group]))
            arrays[group] = np.stack(
                [
                    table[imu_column(sensor, kind, ax)].to_numpy(dtype=float) * factor
                    for ax in _AXES
                ],
                axis=-1,
            )
        imu[sensor] = GamSeries(gyro=arrays["gyro"], accel=arrays["accel"], mag=arrays["mag"])

    cop_factor = _unit_factor("cop", units.get("cop", "mm"))
    pelvis_factor = _unit_factor("pelvis", units.get("pelvis", "mm"))
    recording = Recording(
        manifest=manifest,
        t=t,
        imu=imu,
        cop=CopSeries(
            xy=np.stack(
                [table["cop_x"].to_numpy(dtype=float), table["cop_y"].to_numpy(dtype=float)],
                axis=-1,
            )
            * cop_factor,
            frame=frame,
        ),
        pelvis_xy=np.stack(
            [table["pelvis_x"].to_numpy(dtype=float), table["pelvis_y"].to_numpy(dtype=float)],
            axis=-1,
        )
        * pelvis_factor,
        step_label=table["step"].to_numpy(dtype=int),
        sync=table["sync"].to_numpy(dtype=float),
    )
    findings = validate(recording)
    if findings:
        raise ParseError(f"{csv_path}: invalid recording: " + "; ".join(findings[:5]))
    return recording


# ---------------------------------------------------------------------------
# Trigger synchronization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyncStream:
    """Raw acquisition stream: timestamps, binary sync channel, named channels."""

    t: np.ndarray
    sync: np.ndarray
    channels: dict[str, np.ndarray]


def _trigger_window(stream: SyncStream, name: str) -> tuple[float, float]:
    high = np.asarray(stream.sync) > 0.5
    d = np.diff(high.astype(int))
    rises = np.nonzero(d == 1)[0] + 1
    falls = np.nonzero(d == -1)[0]
    if len(rises) != 1 or len(falls) != 1 or falls[0] <= rises[0]:
        raise NoTrigger(
            f"{name}: expected exactly one rising and one falling edge, "
            f"found {len(rises)} rise(s) and {len(falls)} fall(s)"
        )
    return float(stream.t[rises[0]]), float(stream.t[falls[0]])


def synchronize(
    imu_stream: SyncStream,
    treadmill_stream: SyncStream,
    manifest: Manifest,
    cop_frame: CopFrame = CopFrame.Treadmill,
) -> Recording:
    """Align two triggered streams onto the IMU 100 Hz grid.

    Both streams are trimmed to their own [rise, fall] trigger window; the
    treadmill clock is linearly rescaled so both edges coincide (rejected as
    ClockSkew when the windows disagree by more than 1%), and all treadmill
    channels are linearly interpolated onto the IMU grid.
    """
    fs = manifest.sample_rate_hz
    rise_i, fall_i = _trigger_window(imu_stream, "imu stream")
    rise_t, fall_t = _trigger_window(treadmill_stream, "treadmill stream")
    span_i = fall_i - rise_i
    span_t = fall_t - rise_t
    if span_i <= 0 or span_t <= 0:
        raise NoTrigger("degenerate trigger window")
    if abs(span_i - span_t) / span_i > 0.01:
        raise ClockSkew(
            f"trigger interval mismatch {span_i:.6g} s vs {span_t:.6g} s exceeds 1%"
        )

    n = int(np.floor(span_i * fs)) + 1
    grid = np.arange(n) / fs
    scale = span_i / span_t

    def resample(t_src: np.ndarray, rise: float, ch: np.ndarray, factor: float) -> np.ndarray:
        return np.interp(grid, (np.asarray(t_src) - rise) * factor, np.asarray(ch, dtype=float))

    sensors = sorted(
        {int(c.split("_")[0][3:]) for c in imu_stream.channels if c.startswith("imu")}
    )
    imu: dict[SensorId, GamSeries] = {}
    for sensor in sensors:
        arrays = {}
        for kind, group in (("g", "gyro"), ("a", "accel"), ("m", "mag")):
            cols = []
            for ax in _AXES:
                key = imu_column(sensor, kind, ax)
                if key not in imu_stream.channels:
                    raise ParseError(f"imu stream missing channel {key}")
                cols.append(resample(imu_stream.t, rise_i, imu_stream.channels[key], 1.0))
            arrays[group] = np.stack(cols, axis=-1)
        imu[SensorId(sensor)] = GamSeries(arrays["gyro"], arrays["accel"], arrays["mag"])

    tm = {}
    for key in ("cop_x", "cop_y", "pelvis_x", "pelvis_y"):
        if key not in treadmill_stream.channels:
            raise ParseError(f"treadmill stream missing channel {key}")
        tm[key] = resample(treadmill_stream.t, rise_t, treadmill_stream.channels[key], scale)

    edges = np.cumsum([s.duration_s for s in manifest.protocol_steps]) * fs
    step_label = np.minimum(
        np.searchsorted(edges, np.arange(n), side="right"),
        max(len(manifest.protocol_steps) - 1, 0),
    )
    sync = np.ones(n)
    if n >= 2:
        sync[0] = 0.0
        sync[-1] = 0.0
    return Recording(
        manifest=manifest,
        t=grid,
        imu=imu,
        cop=CopSeries(xy=np.stack([tm["cop_x"], tm["cop_y"]], axis=-1), frame=cop_frame),
        pelvis_xy=np.stack([tm["pelvis_x"], tm["pelvis_y"]], axis=-1),
        step_label=step_label,
        sync=sync,
    )


# ---------------------------------------------------------------------------
# Train/test splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerStepFraction:
    """First ``train_fraction`` of every protocol step to train, rest to test."""

    train_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise SpecTooLarge(f"train_fraction {self.train_fraction} not in (0, 1)")


@dataclass(frozen=True)
class ContiguousSeconds:
    """One seed-chosen contiguous block of the given length to train."""

    seconds: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.seconds <= 0:
            raise SpecTooLarge(f"seconds {self.seconds} must be positive")


SplitSpec = PerStepFraction | ContiguousSeconds


def subset_recording(recording: Recording, indices: np.ndarray) -> Recording:
    """Sample-wise subset keeping original timestamps (gaps allowed)."""
    idx = np.asarray(indices)
    return replace(
        recording,
        t=recording.t[idx],
        imu={
            s: GamSeries(g.gyro[idx], g.accel[idx], g.mag[idx])
            for s, g in recording.imu.items()
        },
        cop=CopSeries(xy=recording.cop.xy[idx], frame=recording.cop.frame),
        pelvis_xy=recording.pelvis_xy[idx],
        step_label=recording.step_label[idx],
        sync=recording.sync[idx],
    )


def split_mask(recording: Recording, spec: SplitSpec) -> np.ndarray:
    """Boolean train mask for the given split specification."""
    n = len(recording)
    mask = np.zeros(n, dtype=bool)
    if isinstance(spec, PerStepFraction):
        labels = recording.step_label
        for step in np.unique(labels):
            idx = np.nonzero(labels == step)[0]
            k = int(round(spec.train_fraction * len(idx)))
            mask[idx[:k]] = True
        return mask
    if isinstance(spec, ContiguousSeconds):
        fs = recording.manifest.sample_rate_hz
        block = int(round(spec.seconds * fs))
        if block > n:
            raise SpecTooLarge(
                f"requested {spec.seconds} s ({block} samples) exceeds recording "
                f"length {n} samples"
            )
        rng = np.random.default_rng(spec.seed)
        start = int(rng.integers(0, n - block + 1))
        mask[start : start + block] = True
        return mask
    raise TypeError(f"unknown split spec {spec!r}")


def split(recording: Recording, spec: SplitSpec) -> tuple[Recording, Recording]:
    """Split into disjoint (train, test) recordings covering every sample."""
    mask = split_mask(recording, spec)
    return (
        subset_recording(recording, np.nonzero(mask)[0]),
        subset_recording(recording, np.nonzero(~mask)[0]),
    )


def contiguous_runs(t: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """Run index per sample; a new run starts at every time gap > 1.5 dt."""
    t = np.asarray(t, dtype=float)
    if len(t) == 0:
        return np.zeros(0, dtype=int)
    gaps = np.diff(t) > 1.5 / sample_rate_hz
    return np.concatenate([[0], np.cumsum(gaps)]).astype(int)


# ---------------------------------------------------------------------------
# Feature assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelSelection:
    """Which channel kinds feed the model, plus causal history depth.

    ``kinds`` is a subset of "gam" in canonical g, a, m order; ``history`` H
    adds lags 1..H (10 ms apart) next to every lag-0 column.
    """

    kinds: str = "gam"
    history: int = 0

    def __post_init__(self) -> None:
        kinds = "".join(k for k in _KIND_LETTERS if k in self.kinds.lower())
        if not kinds or set(self.kinds.lower()) - set(_KIND_LETTERS):
            raise ParseError(f"bad channel kinds {self.kinds!r}")
        if self.history < 0:
            raise ParseError("history must be >= 0")
        object.__setattr__(self, "kinds", kinds)

    @property
    def channels_per_sensor(self) -> int:
        return 3 * len(self.kinds)

    def n_features(self, constellation: Constellation) -> int:
        return len(constellation) * self.channels_per_sensor * (self.history + 1)


@dataclass(frozen=True)
class FeatureMatrix:
    X: np.ndarray
    columns: tuple[str, ...]
    row_time: np.ndarray
    run_id: np.ndarray
    constellation: Constellation
    selection: ChannelSelection
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.X)


@dataclass(frozen=True)
class TargetMatrix:
    Y: np.ndarray
    row_time: np.ndarray
    frame: CopFrame

    def __len__(self) -> int:
        return len(self.Y)


def build_features(
    recording: Recording,
    constellation: Constellation | None = None,
    selection: ChannelSelection | None = None,
) -> tuple[FeatureMatrix, TargetMatrix]:
    """Assemble the model input/target matrices from a pelvis-frame recording.

    Column layout is sensor-major, channel-minor, lag-innermost (lag 0
    first), deterministic for a given (constellation, selection). Rows whose
    history window would cross a gap between contiguous segments are
    dropped, so every row sees only its own segment's past.
    """
    constellation = constellation or recording.constellation
    selection = selection or ChannelSelection()
    for sensor in constellation:
        if sensor not in recording.imu:
            raise MissingSensor(f"recording has no sensor {sensor.name} ({int(sensor)})")
    if recording.cop.frame is not CopFrame.Pelvis:
        raise WrongFrame("features require a pelvis-frame COP (transform first)")

    kind_arrays = {"g": "gyro", "a": "accel", "m": "mag"}
    blocks = []
    names = []
    h = selection.history
    for sensor in constellation:
        series = recording.imu[sensor]
        for kind in selection.kinds:
            arr = getattr(series, kind_arrays[kind])
            blocks.append(arr)
            names.extend(imu_column(sensor, kind, ax) for ax in _AXES)
    chans = np.hstack(blocks) if blocks else np.zeros((len(recording), 0))

    runs = contiguous_runs(recording.t, recording.manifest.sample_rate_hz)
    x_parts, y_parts, t_parts, run_parts = [], [], [], []
    for run in np.unique(runs):
        idx = np.nonzero(runs == run)[0]
        if len(idx) < h + 1:
            continue
        seg = chans[idx]
        if h == 0:
            lagged = seg[:, :, None]
            rows = idx
        else:
            win = np.lib.stride_tricks.sliding_window_view(seg, h + 1, axis=0)
            lagged = win[..., ::-1]  # lag 0 first
            rows = idx[h:]
        x_parts.append(lagged.reshape(len(rows), -1))
        y_parts.append(recording.cop.xy[rows])
        t_parts.append(recording.t[rows])
        run_parts.append(np.full(len(rows), run, dtype=int))

    if x_parts:
        x = np.ascontiguousarray(np.vstack(x_parts), dtype=float)
        y = np.vstack(y_parts)
        row_time = np.concatenate(t_parts)
        run_id = np.concatenate(run_parts)
    else:
        x = np.zeros((0, selection.n_features(constellation)))
        y = np.zeros((0, 2))
        row_time = np.zeros(0)
        run_id = np.zeros(0, dtype=int)

    columns = tuple(
        f"{name}_lag{lag}" for name in names for lag in range(h + 1)
    )
    fm = FeatureMatrix(
        X=x,
        columns=columns,
        row_time=row_time,
        run_id=run_id,
        constellation=constellation,
        selection=selection,
    )
    tm = TargetMatrix(Y=y, row_time=row_time, frame=recording.cop.frame)
    return fm, tm


def standardization_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and divisor; near-constant columns get divisor 1."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def apply_standardization(
    fm: FeatureMatrix, mean: np.ndarray, std: np.ndarray
) -> FeatureMatrix:
    return replace(fm, X=(fm.X - mean) / std, mean=mean, std=std)


def standardize(train: FeatureMatrix, *others: FeatureMatrix) -> tuple[FeatureMatrix, ...]:
    """Z-score all matrices using the training matrix's column statistics."""
    if len(train) == 0:
        raise SpecTooLarge("cannot standardize an empty training matrix")
    mean, std = standardization_stats(train.X)
    return tuple(apply_standardization(fm, mean, std) for fm in (train, *others))
