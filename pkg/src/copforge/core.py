"""Domain types, units, and identifiers shared across the package.

Canonical internal units, fixed at ingest time:

* gyroscope            rad/s, sensor body frame
* accelerometer        m/s^2, sensor body frame (reads +9.81 "up" at rest)
* magnetometer         dimensionless unit vector, sensor body frame
* COP / pelvis         mm; +x anterior (walking direction), +y subject-left
* time                 seconds, 100 Hz uniform sampling
* quaternions          scalar-first (w, x, y, z), body-to-world convention
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Iterator

import numpy as np

SAMPLE_RATE_HZ = 100.0
GRAVITY_MS2 = 9.81


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class CopforgeError(Exception):
    """Base class for all package-specific errors."""


class CollinearMarkers(CopforgeError):
    """Marker triplet too close to a line to define a segment frame."""


class DegenerateObservations(CopforgeError):
    """Observation vectors too close to parallel for orientation recovery."""


class WrongFrame(CopforgeError):
    """A COP series arrived in the wrong coordinate frame."""


class SeriesTooShort(CopforgeError):
    """Operation needs a longer time series than was provided."""


class ParseError(CopforgeError):
    """Malformed file content."""


class ManifestMismatch(CopforgeError):
    """Manifest-declared sensors disagree with the data columns."""


class UnitError(CopforgeError):
    """Unknown or unsupported unit tag in a manifest."""


class NoTrigger(CopforgeError):
    """Sync channel is missing a rising or falling edge."""


class ClockSkew(CopforgeError):
    """Trigger intervals of two streams disagree beyond tolerance."""


class SpecTooLarge(CopforgeError):
    """Requested train span exceeds the recording duration."""


class MissingSensor(CopforgeError):
    """Requested constellation includes a sensor absent from the recording."""


class DimensionMismatch(CopforgeError):
    """Matrix dimensionality does not match the model descriptor."""


class ShapeMismatch(CopforgeError):
    """Prediction and truth matrices have different shapes."""


class SingularSystem(CopforgeError):
    """Normal equations are numerically singular."""


class Diverged(CopforgeError):
    """Iterative optimization diverged."""


class VersionMismatch(CopforgeError):
    """Model file version is not supported."""


class ConfigInvalid(CopforgeError):
    """Generator or experiment configuration is out of range."""


class EmptyTrace(CopforgeError):
    """Nothing to export."""


# ---------------------------------------------------------------------------
# Identifiers
# ---------------------------------------------------------------------------

class SensorId(IntEnum):
    """The seven wearable placements, numbered to match the mounting diagram."""

    Back = 2
    RThigh = 3
    RShank = 4
    RFoot = 5
    LThigh = 6
    LShank = 7
    LFoot = 8


ALL_SENSORS: tuple[SensorId, ...] = tuple(SensorId)

LEFT_SIDE_SENSORS = frozenset({SensorId.LThigh, SensorId.LShank, SensorId.LFoot})


class CopFrame(Enum):
    Treadmill = "Treadmill"
    Pelvis = "Pelvis"


class Source(Enum):
    Measured = "Measured"
    Synthetic = "Synthetic"
    ConvertedPublic = "ConvertedPublic"


@dataclass(frozen=True, order=True)
class Constellation:
    """Non-empty subset of the seven sensor placements, canonically ordered.

    The canonical order (ascending numeric label) fixes the feature-column
    layout, so serializing and re-parsing a constellation always reproduces
    the same matrix columns.
    """

    sensors: tuple[SensorId, ...]

    def __post_init__(self) -> None:
        ordered = tuple(sorted(set(SensorId(s) for s in self.sensors)))
        if not ordered:
            raise ConfigInvalid("constellation must contain at least one sensor")
        object.__setattr__(self, "sensors", ordered)

    @classmethod
    def full(cls) -> "Constellation":
        return cls(ALL_SENSORS)

    @classmethod
    def of(cls, *sensors: SensorId | int) -> "Constellation":
        return cls(tuple(SensorId(s) for s in sensors))

    @classmethod
    def from_string(cls, text: str) -> "Constellation":
        """Parse a comma-separated label list such as ``"2,3,6"``."""
        try:
            labels = [int(tok) for tok in text.replace(" ", "").split(",") if tok]
        except ValueError as exc:
            raise ParseError(f"bad constellation {text!r}") from exc
        if not labels:
            raise ParseError(f"empty constellation {text!r}")
        try:
            return cls(tuple(SensorId(n) for n in labels))
        except ValueError as exc:
            raise ParseError(f"unknown sensor label in {text!r}") from exc

    @classmethod
    def all_nonempty(cls) -> Iterator["Constellation"]:
        """All 127 non-empty subsets, in deterministic (bitmask) order."""
        for mask in range(1, 1 << len(ALL_SENSORS)):
            yield cls(tuple(s for i, s in enumerate(ALL_SENSORS) if mask >> i & 1))

    def to_string(self) -> str:
        return ",".join(str(int(s)) for s in self.sensors)

    def __iter__(self) -> Iterator[SensorId]:
        return iter(self.sensors)

    def __len__(self) -> int:
        return len(self.sensors)

    def __contains__(self, sensor: object) -> bool:
        return sensor in self.sensors

    def issubset(self, other: "Constellation") -> bool:
        return set(self.sensors) <= set(other.sensors)


# ---------------------------------------------------------------------------
# Series containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GamSeries:
    """Synchronized gyroscope / accelerometer / magnetometer triplet series.

    Each field is an (N, 3) float array in the sensor body frame.
    """

    gyro: np.ndarray
    accel: np.ndarray
    mag: np.ndarray

    def __len__(self) -> int:
        return len(self.gyro)

    def channels(self, kinds: str = "gam") -> np.ndarray:
        """Stack the selected channel kinds into an (N, 3*len(kinds)) array."""
        parts = {"g": self.gyro, "a": self.accel, "m": self.mag}
        return np.hstack([parts[k] for k in kinds])


@dataclass(frozen=True)
class CopSeries:
    """Centre-of-pressure trajectory with its coordinate-frame tag.

    ``xy`` is (N, 2) in mm; column 0 is anterior x, column 1 is lateral y.
    """

    xy: np.ndarray
    frame: CopFrame

    def __len__(self) -> int:
        return len(self.xy)


@dataclass(frozen=True)
class ProtocolStep:
    speed_mps: float
    perturbation_pct_bw: float
    duration_s: float


@dataclass(frozen=True)
class Manifest:
    subject_id: str
    mass_kg: float
    height_cm: float
    sample_rate_hz: float
    protocol_steps: tuple[ProtocolStep, ...]
    source: Source

    def total_duration_s(self) -> float:
        return float(sum(s.duration_s for s in self.protocol_steps))


@dataclass(frozen=True)
class Recording:
    """One subject session: per-sensor GAM series plus treadmill channels.

    All series share length N. ``t`` is uniformly spaced at the manifest
    sample rate for freshly generated or loaded recordings; train/test
    subsets keep original timestamps and may therefore contain gaps.
    Instances are treated as immutable and are safe to share across workers.
    """

    manifest: Manifest
    t: np.ndarray
    imu: dict[SensorId, GamSeries]
    cop: CopSeries
    pelvis_xy: np.ndarray
    step_label: np.ndarray
    sync: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def constellation(self) -> Constellation:
        return Constellation(tuple(self.imu.keys()))

    def duration_s(self) -> float:
        return len(self) / self.manifest.sample_rate_hz

    def step_speeds(self) -> np.ndarray:
        """Per-sample protocol walking speed (m/s)."""
        speeds = np.array([s.speed_mps for s in self.manifest.protocol_steps])
        return speeds[self.step_label]


# ---------------------------------------------------------------------------
# Quaternion conventions
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize quaternion(s) to unit length.

    Already-unit inputs (within 4 ulp of squared norm 1) are returned
    unchanged, which makes normalization bit-exactly idempotent.
    """
    q = np.asarray(q, dtype=float)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(n2 <= 0.0) or not np.all(np.isfinite(n2)):
        raise ConfigInvalid("cannot normalize zero or non-finite quaternion")
    if np.all(np.abs(n2 - 1.0) < 1e-12):
        return q
    return q / np.sqrt(n2)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _check_finite(name: str, arr: np.ndarray, findings: list[str]) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.argwhere(bad)[0][0])
        findings.append(f"{name} has non-finite value at sample {idx}")


def validate(recording: Recording) -> list[str]:
    """Check every structural invariant of a recording.

    Returns a list of human-readable violation descriptions, one per finding
    (field, sample index, rule). An empty list means the recording is
    well-formed. Never raises.
    """
    findings: list[str] = []
    n = len(recording.t)
    if n < 1:
        findings.append("t length 0 < 1")
        return findings

    fs = recording.manifest.sample_rate_hz
    if fs <= 0:
        findings.append(f"manifest sample_rate {fs} must be > 0")
    else:
        dt = np.diff(recording.t)
        if np.any(dt <= 0):
            idx = int(np.argmax(dt <= 0))
            findings.append(f"t not strictly increasing at sample {idx + 1}")
        bad = np.abs(dt - 1.0 / fs) > 1e-6
        if bad.any():
            idx = int(np.argmax(bad))
            findings.append(
                f"t spacing {dt[idx]:.6g} s != {1.0 / fs:.6g} s at sample {idx + 1}"
            )

    for step_i, step in enumerate(recording.manifest.protocol_steps):
        if step.duration_s <= 0:
            findings.append(f"protocol step {step_i} duration {step.duration_s} <= 0")

    for sensor in sorted(recording.imu):
        series = recording.imu[sensor]
        for kind, arr in (("gyro", series.gyro), ("accel", series.accel), ("mag", series.mag)):
            if len(arr) != n:
                findings.append(
                    f"imu[{SensorId(sensor).name}].{kind} length {len(arr)} != {n}"
                )
            else:
                _check_finite(f"imu[{SensorId(sensor).name}].{kind}", arr, findings)

    for name, arr in (
        ("cop", recording.cop.xy),
        ("pelvis_xy", recording.pelvis_xy),
        ("step_label", recording.step_label),
        ("sync", recording.sync),
    ):
        if len(arr) != n:
            findings.append(f"{name} length {len(arr)} != {n}")
        else:
            _check_finite(name, np.asarray(arr, dtype=float), findings)

    n_steps = len(recording.manifest.protocol_steps)
    if n_steps and len(recording.step_label) == n:
        labels = np.asarray(recording.step_label)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_steps:
            findings.append(
                f"step_label out of range [0, {n_steps - 1}] "
                f"at sample {int(np.argmax((labels < 0) | (labels >= n_steps)))}"
            )

    return findings
