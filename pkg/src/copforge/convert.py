"""Convert externally recorded kinematics into canonical recordings.

Two source layouts are supported, both flat CSV with a manifest sidecar
(same schema as recording manifests):

* quaternion mode — per-segment orientation series in columns
  ``imu{n}_q_{w|x|y|z}``;
* marker mode — per-segment marker triplets in columns
  ``seg{n}_m{1|2|3}_{x|y|z}`` (lab frame, mm).

Both carry ``t, cop_x, cop_y, pelvis_x, pelvis_y`` and optional ``step`` /
``sync`` columns. Conversion recovers each segment's orientation, applies
the per-sensor fixed alignment rotation, synthesizes gyro/accel/mag
channels, and expresses the COP in the pelvis frame.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from .core import (
    CollinearMarkers,
    CopFrame,
    CopSeries,
    GamSeries,
    Manifest,
    ParseError,
    ProtocolStep,
    Recording,
    SAMPLE_RATE_HZ,
    SensorId,
    Source,
)
from .dataio import load_recording, manifest_path_for, save_recording
from .kinematics import (
    ReferenceFields,
    apply_fixed_rotation,
    hemisphere_align,
    markers_to_orientation,
    quat_series_to_gyro,
    quat_to_am,
    to_pelvis_frame,
)

import json


def _read_manifest(csv_path: Path) -> tuple[Manifest, list[SensorId], CopFrame]:
    mpath = manifest_path_for(csv_path)
    if not mpath.exists():
        raise ParseError(f"manifest sidecar not found: {mpath}")
    try:
        meta = json.loads(mpath.read_text(encoding="utf-8"))
        manifest = Manifest(
            subject_id=str(meta["subject_id"]),
            mass_kg=float(meta["mass_kg"]),
            height_cm=float(meta["height_cm"]),
            sample_rate_hz=float(meta.get("sample_rate_hz", SAMPLE_RATE_HZ)),
            protocol_steps=tuple(
                ProtocolStep(
                    float(s["speed_mps"]),
                    float(s["perturbation_pct_bw"]),
                    float(s["duration_s"]),
                )
                for s in meta["protocol_steps"]
            ),
            source=Source(meta.get("source", Source.ConvertedPublic.value)),
        )
        sensors = [SensorId(int(s)) for s in meta["sensors"]]
        frame = CopFrame(meta.get("cop_frame", CopFrame.Treadmill.value))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad manifest {mpath}: {exc}") from exc
    return manifest, sensors, frame


def _segment_quaternions(
    table: pd.DataFrame, sensor: SensorId, quaternion_mode: bool
) -> np.ndarray:
    if quaternion_mode:
        cols = [f"imu{int(sensor)}_q_{c}" for c in "wxyz"]
        missing = [c for c in cols if c not in table.columns]
        if missing:
            raise ParseError(f"segment {sensor.name}: missing columns {missing}")
        return hemisphere_align(table[cols].to_numpy(dtype=float))
    points = []
    for marker in (1, 2, 3):
        cols = [f"seg{int(sensor)}_m{marker}_{ax}" for ax in "xyz"]
        missing = [c for c in cols if c not in table.columns]
        if missing:
            raise ParseError(f"segment {sensor.name}: missing columns {missing}")
        points.append(table[cols].to_numpy(dtype=float))
    try:
        q = markers_to_orientation(*points)
    except CollinearMarkers as exc:
        raise CollinearMarkers(f"segment {sensor.name}: {exc}") from exc
    return hemisphere_align(q)


def convert_source_file(
    csv_path: Path | str,
    alignment: dict[SensorId, np.ndarray] | None = None,
    reference: ReferenceFields | None = None,
) -> Recording:
    """Build a canonical pelvis-frame recording from a kinematics source file."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise ParseError(f"source file not found: {csv_path}")
    manifest, sensors, frame = _read_manifest(csv_path)
    reference = reference or ReferenceFields()
    alignment = alignment or {}

    try:
        table = pd.read_csv(csv_path)
    except Exception as exc:
        raise ParseError(f"cannot parse {csv_path}: {exc}") from exc
    for col in ("t", "cop_x", "cop_y", "pelvis_x", "pelvis_y"):
        if col not in table.columns:
            raise ParseError(f"{csv_path}: missing column {col}")

    quaternion_mode = any(c.endswith("_q_w") for c in table.columns)
    n = len(table)
    t = table["t"].to_numpy(dtype=float)
    dt = 1.0 / manifest.sample_rate_hz

    imu: dict[SensorId, GamSeries] = {}
    for sensor in sensors:
        q = _segment_quaternions(table, sensor, quaternion_mode)
        fix = alignment.get(sensor)
        if fix is not None:
            q = apply_fixed_rotation(q, fix)
        gyro = quat_series_to_gyro(q, dt)
        accel, mag = quat_to_am(q, reference)
        imu[sensor] = GamSeries(gyro=gyro, accel=accel, mag=mag)

    pelvis_xy = np.stack(
        [table["pelvis_x"].to_numpy(dtype=float), table["pelvis_y"].to_numpy(dtype=float)],
        axis=-1,
    )
    cop_xy = np.stack(
        [table["cop_x"].to_numpy(dtype=float), table["cop_y"].to_numpy(dtype=float)],
        axis=-1,
    )
    if frame is CopFrame.Treadmill:
        cop = to_pelvis_frame(CopSeries(xy=cop_xy, frame=frame), pelvis_xy)
    else:
        cop = CopSeries(xy=cop_xy, frame=frame)

    if "step" in table.columns:
        step_label = table["step"].to_numpy(dtype=int)
    else:
        edges = np.cumsum([s.duration_s for s in manifest.protocol_steps]) * manifest.sample_rate_hz
        step_label = np.minimum(
            np.searchsorted(edges, np.arange(n), side="right"),
            max(len(manifest.protocol_steps) - 1, 0),
        )
    if "sync" in table.columns:
        sync = table["sync"].to_numpy(dtype=float)
    else:
        sync = np.ones(n)
        if n >= 2:
            sync[0] = 0.0
            sync[-1] = 0.0

    return Recording(
        manifest=manifest,
        t=t,
        imu=imu,
        cop=cop,
        pelvis_xy=pelvis_xy,
        step_label=step_label,
        sync=sync,
    )


def convert_and_save(
    csv_path: Path | str,
    out_dir: Path | str,
    alignment: dict[SensorId, np.ndarray] | None = None,
    name: str | None = None,
) -> Path:
    """Convert a source file and write the canonical CSV/manifest pair."""
    recording = convert_source_file(csv_path, alignment)
    out_name = name or (Path(csv_path).stem + "_converted")
    out_path = Path(out_dir) / f"{out_name}.csv"
    save_recording(recording, out_path)
    # loader re-validates the canonical pair end to end
    load_recording(out_path)
    return out_path
