"""Deterministic synthetic gait generator.

Produces recordings with known segment orientations and a known
centre-of-pressure trajectory, so the whole estimation pipeline can be
tested against an exact oracle. The construction is kinematic: COP is a
smooth function of a gait phase that advances with walking speed, segment
orientations oscillate about segment-appropriate axes, and the inertial
channels are synthesized from those orientations. Everything is a pure
function of the configuration, including the noise draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    ConfigInvalid,
    CopFrame,
    CopSeries,
    GamSeries,
    LEFT_SIDE_SENSORS,
    Manifest,
    ProtocolStep,
    Recording,
    SAMPLE_RATE_HZ,
    SensorId,
    Source,
)
from .kinematics import (
    ReferenceFields,
    quat_from_rotvec,
    quat_multiply,
    quat_rotate,
    quat_conjugate,
    quat_series_to_gyro,
    quat_to_am,
)

REF_SPEED_MPS = 0.5

# d 90-degree phase of the vertical-bob harmonic shared by the trunk pitch
# and the shank rocker; sharing it keeps the trunk's gait component inside
# the linear span of the limb channels.
_BOB_PHASE = 0.9

# rotation amplitudes (rad) at reference speed and subject_scale 1
_BACK_ROLL = 0.10
_BACK_PITCH = 0.12
_THIGH = 0.42
_SHANK = 0.38
_FOOT = 0.30


@dataclass(frozen=True)
class ButterflyParams:
    """Geometry of the closed COP trace over one stride (free parameters)."""

    anterior_mm: float = 45.0
    lateral_mm: float = 35.0
    lobe_harmonic: float = 0.15
    smoothing: float = 1.4


@dataclass(frozen=True)
class SynthGaitConfig:
    duration_s: float = 600.0
    cadence_hz: float = 1.8  # steps per second at reference speed
    speed_mps: float = REF_SPEED_MPS
    subject_scale: float = 1.0
    mount_offsets: dict[SensorId, np.ndarray] = field(default_factory=dict)
    asymmetry: float = 0.0
    noise_frac: float = 0.03
    seed: int = 0
    protocol_steps: tuple[ProtocolStep, ...] | None = None
    subject_id: str = "synthetic"
    butterfly: ButterflyParams = field(default_factory=ButterflyParams)
    pelvis_coupling: float = 0.35
    include_linear_accel: bool = False
    reference: ReferenceFields = field(default_factory=ReferenceFields)

    def resolved_protocol(self) -> tuple[ProtocolStep, ...]:
        if self.protocol_steps is not None:
            return tuple(self.protocol_steps)
        return default_protocol(self.duration_s, self.speed_mps)


@dataclass(frozen=True)
class SynthTruth:
    """Noise-free internals of a generated recording, for oracle tests."""

    phase: np.ndarray
    cop_pelvis: np.ndarray
    quat: dict[SensorId, np.ndarray]


def default_protocol(duration_s: float, speed_mps: float) -> tuple[ProtocolStep, ...]:
    """Quiet standing at both ends, three walking speeds in between.

    Falls back to a single walking step when the duration is too short to
    fit standing phases.
    """
    if duration_s <= 0:
        raise ConfigInvalid("duration must be positive")
    qs = 30.0 if duration_s >= 150 else max(1.0, 0.1 * duration_s)
    walk = duration_s - 2 * qs
    if walk <= 3.0:
        return (ProtocolStep(speed_mps, 0.0, duration_s),)
    speeds = (0.76 * speed_mps, speed_mps, 1.6 * speed_mps)
    d1 = walk / 3.0
    d3 = walk - 2 * d1
    return (
        ProtocolStep(0.0, 0.0, qs),
        ProtocolStep(speeds[0], 0.0, d1),
        ProtocolStep(speeds[1], 10.0, d1),
        ProtocolStep(speeds[2], 0.0, d3),
        ProtocolStep(0.0, 0.0, qs),
    )


# ---------------------------------------------------------------------------
# COP butterfly
# ---------------------------------------------------------------------------

def _butterfly_components(
    phase: np.ndarray, params: ButterflyParams, asymmetry: float
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized anterior/lateral components, each with peak magnitude 1."""
    theta = np.asarray(phase, dtype=float)
    h = params.lobe_harmonic
    y0 = (np.sin(theta) - h * np.sin(3.0 * theta)) / (1.0 + h)
    # scale left lobes (y > 0) by up to (1 + a); monotone in y0, so lobe
    # peaks stay at the unskewed extrema and the peak ratio is exactly 1 + a
    y = y0 * (1.0 + asymmetry * (1.0 + y0) / 2.0)

    c = params.smoothing
    if c <= 1.0:
        raise ConfigInvalid("butterfly smoothing must be > 1")
    saw = np.arctan(np.sin(2.0 * theta) / (np.cos(2.0 * theta) + c))
    x = saw / math.atan(1.0 / math.sqrt(c * c - 1.0))
    return x, y


def butterfly_cop(
    phase: np.ndarray, params: ButterflyParams | None = None, asymmetry: float = 0.0
) -> np.ndarray:
    """COP trace (mm) over gait phase: smooth, 2*pi-periodic figure-eight.

    The anterior component sweeps heel-to-toe once per step (a smoothed
    sawtooth at twice the stride frequency); the lateral component alternates
    between the feet once per stride. ``asymmetry`` in [0, 1] skews the
    subject-left lobes to ``1 + asymmetry`` times the right-lobe amplitude.

    Returns an array of shape ``phase.shape + (2,)`` with columns
    (x_anterior, y_lateral).
    """
    if params is None:
        params = ButterflyParams()
    if not 0.0 <= asymmetry <= 1.0:
        raise ConfigInvalid("asymmetry must lie in [0, 1]")
    x, y = _butterfly_components(phase, params, asymmetry)
    return np.stack([params.anterior_mm * x, params.lateral_mm * y], axis=-1)


# ---------------------------------------------------------------------------
# Recording synthesis
# ---------------------------------------------------------------------------

def _smooth(x: np.ndarray, fs: float, span_s: float = 0.5, passes: int = 2) -> np.ndarray:
    win = max(1, int(round(span_s * fs)))
    kernel = np.ones(win) / win
    out = x.astype(float)
    for _ in range(passes):
        padded = np.concatenate([out[:1].repeat(win), out, out[-1:].repeat(win)])
        out = np.convolve(padded, kernel, mode="same")[win:-win]
    return out


def _segment_rotvecs(
    theta: np.ndarray,
    amp: np.ndarray,
    cfg: SynthGaitConfig,
    x_norm: np.ndarray,
    y_norm: np.ndarray,
) -> dict[SensorId, np.ndarray]:
    """Per-segment rotation vectors (N, 3): roll about x, pitch about y."""
    s = cfg.subject_scale
    a = cfg.asymmetry
    c = cfg.pelvis_coupling
    left_gain = 1.0 - 0.4 * a
    n = len(theta)

    def pitch_only(angle: np.ndarray) -> np.ndarray:
        rv = np.zeros((n, 3))
        rv[:, 1] = angle
        return rv

    rvs: dict[SensorId, np.ndarray] = {}
    back = np.zeros((n, 3))
    back[:, 0] = _BACK_ROLL * s * amp * ((1.0 - c) * np.sin(theta) + c * y_norm)
    back[:, 1] = _BACK_PITCH * s * amp * (
        (1.0 - c) * np.sin(2.0 * theta + _BOB_PHASE) + c * x_norm
    )
    rvs[SensorId.Back] = back

    for sensor, base_amp, swing in (
        (SensorId.RThigh, _THIGH, lambda th: np.sin(th)),
        (SensorId.RShank, _SHANK, lambda th: np.sin(th - 0.65) + 0.40 * np.sin(2.0 * th + _BOB_PHASE)),
        (SensorId.RFoot, _FOOT, lambda th: np.sin(th - 1.15) + 0.35 * np.sin(2.0 * th + 1.0)),
    ):
        rvs[sensor] = pitch_only(base_amp * s * amp * swing(theta))

    for sensor, base_amp, swing in (
        (SensorId.LThigh, _THIGH, lambda th: np.sin(th)),
        (SensorId.LShank, _SHANK, lambda th: np.sin(th - 0.65) + 0.40 * np.sin(2.0 * th + _BOB_PHASE)),
        (SensorId.LFoot, _FOOT, lambda th: np.sin(th - 1.15) + 0.35 * np.sin(2.0 * th + 1.0)),
    ):
        rvs[sensor] = pitch_only(base_amp * s * amp * left_gain * swing(theta + np.pi))

    return rvs


def _apply_noise(
    clean: np.ndarray, noise_frac: float, rng: np.random.Generator
) -> np.ndarray:
    """Multiplicative-plus-additive white noise, split evenly by variance.

    Per channel, the injected noise standard deviation equals
    ``noise_frac * std(channel)``.
    """
    if noise_frac == 0.0:
        return clean
    out = np.empty_like(clean)
    for j in range(clean.shape[1]):
        col = clean[:, j]
        sig = float(np.std(col))
        if sig == 0.0:
            out[:, j] = col
            continue
        target = noise_frac * sig
        rms = float(np.sqrt(np.mean(col * col)))
        m = target / (np.sqrt(2.0) * rms)
        b = target / np.sqrt(2.0)
        nu = rng.standard_normal(len(col))
        eps = rng.standard_normal(len(col))
        out[:, j] = col * (1.0 + m * nu) + b * eps
    return out


def _linear_accel_world(
    sensor: SensorId, theta: np.ndarray, amp: np.ndarray, fs: float, scale: float
) -> np.ndarray:
    """Optional world-frame linear acceleration of the sensor mount point."""
    vertical = {SensorId.Back: 10.0, SensorId.RThigh: 20.0, SensorId.LThigh: 20.0,
                SensorId.RShank: 30.0, SensorId.LShank: 30.0,
                SensorId.RFoot: 45.0, SensorId.LFoot: 45.0}[sensor]
    side = np.pi if sensor in LEFT_SIDE_SENSORS else 0.0
    pos = np.zeros((len(theta), 3))
    pos[:, 2] = vertical * scale * amp * np.sin(2.0 * theta + side)  # mm
    pos[:, 1] = 0.5 * vertical * scale * amp * np.sin(theta + side)
    acc = np.zeros_like(pos)
    acc[1:-1] = (pos[2:] - 2 * pos[1:-1] + pos[:-2]) * fs * fs
    acc[0] = acc[1]
    acc[-1] = acc[-2]
    return acc / 1000.0  # mm/s^2 -> m/s^2


def generate_recording(
    cfg: SynthGaitConfig, return_truth: bool = False
) -> Recording | tuple[Recording, SynthTruth]:
    """Generate one synthetic subject session.

    The gait phase advances with the (smoothed) protocol speed and freezes
    during quiet standing, where all oscillation amplitudes also vanish, so
    standing segments show the static posture plus mount offsets only.
    Inertial channels are synthesized from the segment orientations; the
    treadmill-frame COP is the pelvis-frame butterfly plus the pelvis sway.
    Every measured channel (IMU, COP, pelvis) receives noise scaled to its
    own signal spread; the returned truth object keeps the clean series.
    """
    if cfg.noise_frac < 0:
        raise ConfigInvalid("noise_frac must be >= 0")
    if not 0.0 <= cfg.asymmetry <= 1.0:
        raise ConfigInvalid("asymmetry must lie in [0, 1]")
    if not 0.0 <= cfg.pelvis_coupling <= 1.0:
        raise ConfigInvalid("pelvis_coupling must lie in [0, 1]")
    if cfg.cadence_hz <= 0 or cfg.speed_mps < 0 or cfg.subject_scale <= 0:
        raise ConfigInvalid("cadence, speed and subject_scale must be positive")

    fs = SAMPLE_RATE_HZ
    steps = cfg.resolved_protocol()
    counts = [max(1, int(round(s.duration_s * fs))) for s in steps]
    n = int(sum(counts))
    if n < 3:
        raise ConfigInvalid("recording must span at least 3 samples")
    t = np.arange(n) / fs
    step_label = np.repeat(np.arange(len(steps)), counts)

    speeds = np.array([s.speed_mps for s in steps])
    speed_t = _smooth(speeds[step_label], fs)
    u = np.clip(speed_t / REF_SPEED_MPS, 0.0, None)
    amp = np.sqrt(u)
    f_stride = 0.5 * cfg.cadence_hz * u**0.25
    theta = 2.0 * np.pi * np.cumsum(f_stride) / fs

    x_n, y_raw = _butterfly_components(theta, cfg.butterfly, cfg.asymmetry)
    y_n = y_raw / (1.0 + cfg.asymmetry)  # rescaled to peak 1 for the coupling terms
    cop_pelvis = np.stack(
        [cfg.butterfly.anterior_mm * x_n * amp,
         cfg.butterfly.lateral_mm * y_raw * amp],
        axis=-1,
    )
    pelvis_xy = np.stack(
        [6.0 * amp * np.sin(2.0 * theta + 0.7), 18.0 * amp * np.sin(theta - 0.3)],
        axis=-1,
    )
    cop_treadmill = cop_pelvis + pelvis_xy

    rng = np.random.default_rng(cfg.seed)
    # treadmill channels first, so their noise draw is independent of the
    # sensor configuration (same seed => same measured COP)
    cop_treadmill = _apply_noise(cop_treadmill, cfg.noise_frac, rng)
    pelvis_noisy = _apply_noise(pelvis_xy, cfg.noise_frac, rng)
    rvs = _segment_rotvecs(theta, amp, cfg, x_n, y_n)
    imu: dict[SensorId, GamSeries] = {}
    truth_quat: dict[SensorId, np.ndarray] = {}
    for sensor in sorted(rvs):
        q = quat_from_rotvec(rvs[sensor])
        offset = cfg.mount_offsets.get(sensor)
        if offset is not None:
            q = quat_multiply(q, offset)
        truth_quat[sensor] = q
        gyro = quat_series_to_gyro(q, 1.0 / fs)
        accel, mag = quat_to_am(q, cfg.reference)
        if cfg.include_linear_accel:
            acc_w = _linear_accel_world(sensor, theta, amp, fs, cfg.subject_scale)
            accel = accel + quat_rotate(quat_conjugate(q), acc_w)
        imu[sensor] = GamSeries(
            gyro=_apply_noise(gyro, cfg.noise_frac, rng),
            accel=_apply_noise(accel, cfg.noise_frac, rng),
            mag=_apply_noise(mag, cfg.noise_frac, rng),
        )

    sync = np.ones(n)
    sync[0] = 0.0
    sync[-1] = 0.0

    manifest = Manifest(
        subject_id=cfg.subject_id,
        mass_kg=75.0,
        height_cm=177.0,
        sample_rate_hz=fs,
        protocol_steps=tuple(
            ProtocolStep(s.speed_mps, s.perturbation_pct_bw, counts[i] / fs)
            for i, s in enumerate(steps)
        ),
        source=Source.Synthetic,
    )
    recording = Recording(
        manifest=manifest,
        t=t,
        imu=imu,
        cop=CopSeries(xy=cop_treadmill, frame=CopFrame.Treadmill),
        pelvis_xy=pelvis_noisy,
        step_label=step_label,
        sync=sync,
    )
    if not return_truth:
        return recording
    return recording, SynthTruth(phase=theta, cop_pelvis=cop_pelvis, quat=truth_quat)


def random_mount_offsets(
    rng: np.random.Generator, max_deg: float = 10.0
) -> dict[SensorId, np.ndarray]:
    """Small random fixed rotation per sensor, up to ``max_deg`` degrees."""
    offsets = {}
    for sensor in SensorId:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(rng.uniform(0.0, max_deg))
        offsets[sensor] = quat_from_rotvec(axis * angle)
    return offsets


def generate_cohort(
    n_subjects: int,
    base_cfg: SynthGaitConfig,
    seed: int,
    n_patients: int = 0,
    max_offset_deg: float = 10.0,
) -> list[Recording]:
    """Generate a cohort varying subject scale, mount offsets, and gait symmetry.

    The last ``n_patients`` subjects get an asymmetric, patient-like gait
    (asymmetry 0.3); all derived randomness is seeded per subject, so the
    cohort is reproducible bit-for-bit.
    """
    if n_subjects < 2:
        raise ConfigInvalid("a cohort needs at least 2 subjects")
    if not 0 <= n_patients <= n_subjects:
        raise ConfigInvalid("n_patients out of range")
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    recordings = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        scale = 0.9 + 0.2 * rng.random()
        offsets = random_mount_offsets(rng, max_offset_deg)
        patient = i >= n_subjects - n_patients
        cfg = replace(
            base_cfg,
            subject_scale=scale,
            mount_offsets=offsets,
            asymmetry=0.3 if patient else 0.0,
            seed=int(rng.integers(2**63)),
            subject_id=(f"P{i - (n_subjects - n_patients) + 1}" if patient else f"S{i + 1}"),
        )
        recordings.append(generate_recording(cfg))
    return recordings
