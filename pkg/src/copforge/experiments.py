"""Experiment suites: intra-subject evaluation, sensor-placement ablation,
train-size curves, cross-subject transfer with standing calibration, and
gaitogram export.

Every run is a pure function of its inputs and seed; reports re-run
bit-identically. RMS errors are reported in mm with the pooled convention
total^2 = (lateral^2 + anterior^2) / 2.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    ConfigInvalid,
    Constellation,
    CopFrame,
    EmptyTrace,
    Recording,
    ShapeMismatch,
    SpecTooLarge,
)
from .dataio import (
    ChannelSelection,
    ContiguousSeconds,
    FeatureMatrix,
    PerStepFraction,
    TargetMatrix,
    apply_standardization,
    build_features,
    split,
    standardization_stats,
    standardize,
    subset_recording,
)
from .kinematics import to_pelvis_frame
from .models import LinearCopRegressor, LstmCopRegressor, fine_tune

_FLOAT_FMT = "%.6f"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RmsReport:
    """Total/lateral/anterior RMS errors in mm (pooled two-component total)."""

    total: float
    lateral: float
    anterior: float

    def as_dict(self) -> dict[str, float]:
        return {"total_mm": self.total, "lateral_mm": self.lateral, "anterior_mm": self.anterior}


def rms_error(pred: np.ndarray | TargetMatrix, truth: np.ndarray | TargetMatrix) -> RmsReport:
    """Pooled RMS report; column 0 is anterior x, column 1 lateral y."""
    p = pred.Y if isinstance(pred, TargetMatrix) else np.asarray(pred, dtype=float)
    t = truth.Y if isinstance(truth, TargetMatrix) else np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2 or len(p) == 0:
        raise ShapeMismatch(f"pred shape {p.shape} vs truth shape {t.shape}")
    resid = p - t
    anterior = float(np.sqrt(np.mean(resid[:, 0] ** 2)))
    lateral = float(np.sqrt(np.mean(resid[:, 1] ** 2)))
    total = float(np.sqrt((lateral**2 + anterior**2) / 2.0))
    return RmsReport(total=total, lateral=lateral, anterior=anterior)


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------

def ensure_pelvis(recording: Recording) -> Recording:
    """Return the recording with its COP expressed in the pelvis frame."""
    if recording.cop.frame is CopFrame.Pelvis:
        return recording
    return replace(recording, cop=to_pelvis_frame(recording.cop, recording.pelvis_xy))


def _parallel_map(fn, items, jobs: int | None):
    """Order-preserving map over independent jobs (results joined by index)."""
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def make_model(model_kind: str, seed: int = 0, model_params: dict | None = None):
    """Instantiate an estimator by kind: linear, linear-gd, or lstm."""
    params = dict(model_params or {})
    if model_kind == "linear":
        return LinearCopRegressor(**params)
    if model_kind == "linear-gd":
        return LinearCopRegressor(solver="gd", **params)
    if model_kind == "lstm":
        params.setdefault("seed", seed)
        return LstmCopRegressor(**params)
    raise ConfigInvalid(f"unknown model kind {model_kind!r}")


def _fit(model, fm: FeatureMatrix, tm: TargetMatrix):
    if isinstance(model, LstmCopRegressor):
        return model.fit(fm.X, tm.Y, runs=fm.run_id)
    return model.fit(fm.X, tm.Y)


def _predict(model, fm: FeatureMatrix) -> np.ndarray:
    if isinstance(model, LstmCopRegressor):
        return model.predict(fm.X, runs=fm.run_id)
    return model.predict(fm.X)


def _attach_metadata(model, fm: FeatureMatrix) -> None:
    model.feature_mean_ = fm.mean
    model.feature_std_ = fm.std
    model.descriptor_ = {
        "imus": fm.constellation.to_string(),
        "channels": fm.selection.kinds,
        "history": fm.selection.history,
    }


def apply_model(model, recording: Recording) -> tuple[np.ndarray, TargetMatrix]:
    """Predict COP for a whole recording with a saved model's own layout."""
    desc = getattr(model, "descriptor_", None)
    if not desc:
        raise ConfigInvalid("model carries no feature descriptor")
    constellation = Constellation.from_string(desc["imus"])
    selection = ChannelSelection(desc["channels"], int(desc["history"]))
    fm, tm = build_features(ensure_pelvis(recording), constellation, selection)
    mean = getattr(model, "feature_mean_", None)
    if mean is not None:
        fm = apply_standardization(fm, mean, model.feature_std_)
    return _predict(model, fm), tm


# ---------------------------------------------------------------------------
# Intra-subject evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntraSubjectResult:
    subject_id: str
    model_kind: str
    channels: ChannelSelection
    constellation: Constellation
    report: RmsReport
    train_mse: float
    model: object


def run_intra_subject(
    recording: Recording,
    model_kind: str = "linear",
    channels: ChannelSelection | None = None,
    constellation: Constellation | None = None,
    train_fraction: float = 0.5,
    seed: int = 0,
    model_params: dict | None = None,
) -> IntraSubjectResult:
    """Train on the first fraction of every protocol step, test on the rest."""
    channels = channels or ChannelSelection()
    recording = ensure_pelvis(recording)
    constellation = constellation or recording.constellation
    train, test = split(recording, PerStepFraction(train_fraction))
    f_tr, t_tr = build_features(train, constellation, channels)
    f_te, t_te = build_features(test, constellation, channels)
    f_tr, f_te = standardize(f_tr, f_te)

    model = make_model(model_kind, seed, model_params)
    _fit(model, f_tr, t_tr)
    _attach_metadata(model, f_tr)
    train_mse = float(np.mean((_predict(model, f_tr) - t_tr.Y) ** 2))
    report = rms_error(_predict(model, f_te), t_te.Y)
    return IntraSubjectResult(
        subject_id=recording.manifest.subject_id,
        model_kind=model_kind,
        channels=channels,
        constellation=constellation,
        report=report,
        train_mse=train_mse,
        model=model,
    )


# ---------------------------------------------------------------------------
# Sensor-placement ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstellationScore:
    report: RmsReport
    train_mse: float


@dataclass(frozen=True)
class AblationResult:
    scores: dict[Constellation, ConstellationScore]

    def best_worst_by_count(self) -> list[tuple[int, Constellation, Constellation]]:
        """(count, best, worst) per sensor count; ties to the smaller label."""
        table = []
        for count in sorted({len(c) for c in self.scores}):
            group = [c for c in self.scores if len(c) == count]
            best = min(group, key=lambda c: (self.scores[c].report.total, c.sensors))
            worst = max(group, key=lambda c: (self.scores[c].report.total, tuple(-s for s in c.sensors)))
            table.append((count, best, worst))
        return table


def run_ablation(
    recording: Recording,
    model_kind: str = "linear",
    channels: ChannelSelection | None = None,
    train_fraction: float = 0.5,
    seed: int = 0,
    model_params: dict | None = None,
    jobs: int | None = None,
) -> AblationResult:
    """Evaluate all 127 sensor subsets with one shared split and seed.

    The exact linear model reuses the full-constellation Gram matrix:
    a subset's normal equations are a sub-block, so the whole sweep costs
    little more than one fit. Other model kinds fall back to a plain loop,
    parallelized over constellations up to ``jobs`` workers.
    """
    channels = channels or ChannelSelection()
    recording = ensure_pelvis(recording)
    full = recording.constellation
    if len(full) != len(Constellation.full()):
        raise ConfigInvalid("ablation needs the full 7-sensor recording")

    if model_kind != "linear":
        constellations = list(Constellation.all_nonempty())

        def score_one(constellation: Constellation) -> ConstellationScore:
            res = run_intra_subject(
                recording, model_kind, channels, constellation, train_fraction,
                seed, model_params,
            )
            return ConstellationScore(res.report, res.train_mse)

        results = _parallel_map(score_one, constellations, jobs)
        return AblationResult(dict(zip(constellations, results)))

    train, test = split(recording, PerStepFraction(train_fraction))
    f_tr, t_tr = build_features(train, full, channels)
    f_te, t_te = build_features(test, full, channels)
    f_tr, f_te = standardize(f_tr, f_te)

    ridge = float((model_params or {}).get("ridge", 1e-8))
    n = len(f_tr)
    z_tr = np.hstack([f_tr.X, np.ones((n, 1))])
    z_te = np.hstack([f_te.X, np.ones((len(f_te), 1))])
    gram = z_tr.T @ z_tr
    rhs = z_tr.T @ t_tr.Y
    yty = t_tr.Y.T @ t_tr.Y

    block = channels.channels_per_sensor * (channels.history + 1)
    col_of = {sensor: i * block for i, sensor in enumerate(full)}
    bias_col = f_tr.X.shape[1]

    scores = {}
    for constellation in Constellation.all_nonempty():
        idx = np.concatenate(
            [np.arange(col_of[s], col_of[s] + block) for s in constellation] + [[bias_col]]
        )
        g = gram[np.ix_(idx, idx)].copy()
        g[np.arange(len(idx) - 1), np.arange(len(idx) - 1)] += ridge
        w = np.linalg.solve(g, rhs[idx])
        fit_term = 2.0 * np.sum(w * rhs[idx]) - np.sum(w * (gram[np.ix_(idx, idx)] @ w))
        train_mse = float((np.trace(yty) - fit_term) / (n * 2))
        pred = z_te[:, idx] @ w
        scores[constellation] = ConstellationScore(rms_error(pred, t_te.Y), train_mse)
    return AblationResult(scores)


# ---------------------------------------------------------------------------
# Train-size study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSizeCurve:
    sizes_s: tuple[float, ...]
    reports: tuple[tuple[RmsReport, ...], ...]  # [size][repeat]

    def mean_total(self) -> np.ndarray:
        return np.array([np.mean([r.total for r in reps]) for reps in self.reports])

    def std_total(self) -> np.ndarray:
        return np.array([np.std([r.total for r in reps]) for reps in self.reports])


def run_train_size_curve(
    recording: Recording,
    sizes_s: list[float],
    repeats: int = 3,
    seed: int = 0,
    model_kind: str = "linear",
    channels: ChannelSelection | None = None,
    model_params: dict | None = None,
    jobs: int | None = None,
) -> TrainSizeCurve:
    """Repeated contiguous-block draws per train-set size, tested on the rest."""
    channels = channels or ChannelSelection("gam", 10)
    if repeats < 3:
        raise ConfigInvalid("train-size study needs >= 3 repeats per size")
    sizes = [float(s) for s in sizes_s]
    if sorted(sizes) != sizes or len(set(sizes)) != len(sizes):
        raise ConfigInvalid("sizes must be strictly increasing")
    if sizes[-1] >= recording.duration_s():
        raise SpecTooLarge(
            f"largest size {sizes[-1]} s must be below the recording duration "
            f"{recording.duration_s():.6g} s"
        )
    recording = ensure_pelvis(recording)

    def score_draw(task: tuple[int, float, int]) -> RmsReport:
        size_i, size, rep = task
        block_seed = int(np.random.SeedSequence((seed, size_i, rep)).generate_state(1)[0])
        train, test = split(recording, ContiguousSeconds(size, seed=block_seed))
        f_tr, t_tr = build_features(train, None, channels)
        f_te, t_te = build_features(test, None, channels)
        f_tr, f_te = standardize(f_tr, f_te)
        model = make_model(model_kind, block_seed, model_params)
        _fit(model, f_tr, t_tr)
        return rms_error(_predict(model, f_te), t_te.Y)

    tasks = [(i, size, rep) for i, size in enumerate(sizes) for rep in range(repeats)]
    flat = _parallel_map(score_draw, tasks, jobs)
    all_reports = [
        tuple(flat[i * repeats : (i + 1) * repeats]) for i in range(len(sizes))
    ]
    return TrainSizeCurve(sizes_s=tuple(sizes), reports=tuple(all_reports))


# ---------------------------------------------------------------------------
# Transfer with standing calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransferResult:
    target_id: str
    rms_uncalibrated: RmsReport  # case A: no target data used
    rms_calibrated: RmsReport  # case B: target standing data refines the model


def _standing_rows(recording: Recording, calib_seconds: float) -> np.ndarray:
    speeds = recording.step_speeds()
    rows = np.nonzero(speeds == 0.0)[0]
    n = int(round(calib_seconds * recording.manifest.sample_rate_hz))
    return rows[:n]


def run_transfer(
    recordings: list[Recording],
    target_id: str,
    calib_seconds: float = 30.0,
    model_kind: str = "linear",
    channels: ChannelSelection | None = None,
    train_fraction: float = 0.5,
    seed: int = 0,
    model_params: dict | None = None,
    anchor: float = 1.0,
) -> TransferResult:
    """Fit a pooled model on every other subject, then calibrate on the
    target's standing data and evaluate both variants on the target's
    walking test split."""
    channels = channels or ChannelSelection()
    by_id = {r.manifest.subject_id: r for r in recordings}
    if target_id not in by_id:
        raise ConfigInvalid(f"target subject {target_id!r} not among recordings")
    if len(recordings) < 2:
        raise ConfigInvalid("transfer needs at least 2 subjects")
    target = ensure_pelvis(by_id[target_id])
    others = [ensure_pelvis(r) for r in recordings if r.manifest.subject_id != target_id]

    # pooled training features over all non-target subjects
    xs, ys, runs = [], [], []
    run_offset = 0
    constellation = target.constellation
    for rec in others:
        fm, tm = build_features(rec, constellation, channels)
        xs.append(fm.X)
        ys.append(tm.Y)
        runs.append(fm.run_id + run_offset)
        run_offset += fm.run_id.max(initial=0) + 1
    x_pool = np.vstack(xs)
    y_pool = np.vstack(ys)
    run_pool = np.concatenate(runs)
    mean, std = standardization_stats(x_pool)
    x_pool = (x_pool - mean) / std

    model = make_model(model_kind, seed, model_params)
    if isinstance(model, LstmCopRegressor):
        model.fit(x_pool, y_pool, runs=run_pool)
    else:
        model.fit(x_pool, y_pool)

    # target test split: last halves of the walking steps only
    walking = np.nonzero(target.step_speeds() > 0.0)[0]
    walk_rec = subset_recording(target, walking)
    _, test_rec = split(walk_rec, PerStepFraction(train_fraction))
    f_te, t_te = build_features(test_rec, constellation, channels)
    f_te = apply_standardization(f_te, mean, std)
    case_a = rms_error(_predict(model, f_te), t_te.Y)

    if calib_seconds > 0:
        calib_rows = _standing_rows(target, calib_seconds)
        if len(calib_rows) == 0:
            raise ConfigInvalid("target has no standing (speed 0) data to calibrate on")
        calib_rec = subset_recording(target, calib_rows)
        f_cal, t_cal = build_features(calib_rec, constellation, channels)
        f_cal = apply_standardization(f_cal, mean, std)
        tuned = fine_tune(model, f_cal.X, t_cal.Y, runs=f_cal.run_id, anchor=anchor)
        case_b = rms_error(_predict(tuned, f_te), t_te.Y)
    else:
        case_b = case_a

    return TransferResult(
        target_id=target_id, rms_uncalibrated=case_a, rms_calibrated=case_b
    )


# ---------------------------------------------------------------------------
# Gaitogram export
# ---------------------------------------------------------------------------

def export_gaitogram(
    cop_xy: np.ndarray,
    out_base: Path | str,
    pred_xy: np.ndarray | None = None,
    title: str = "Gaitogram",
) -> tuple[Path, Path]:
    """Write the COP trace as CSV plus an SVG plot (anterior vs lateral, mm).

    ``out_base`` is extended with ``.csv`` / ``.svg``. With ``pred_xy`` the
    plot overlays measured and predicted traces with a legend.
    """
    cop_xy = np.asarray(cop_xy, dtype=float)
    if cop_xy.ndim != 2 or cop_xy.shape[1] != 2 or len(cop_xy) == 0:
        raise EmptyTrace("gaitogram needs a non-empty (N, 2) COP trace")
    if pred_xy is not None:
        pred_xy = np.asarray(pred_xy, dtype=float)
        if pred_xy.shape != cop_xy.shape:
            raise ShapeMismatch(f"overlay shape {pred_xy.shape} vs {cop_xy.shape}")
    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)

    csv_path = out_base.with_suffix(".csv")
    header = "x_anterior_mm,y_lateral_mm"
    data = cop_xy
    if pred_xy is not None:
        header += ",pred_x_anterior_mm,pred_y_lateral_mm"
        data = np.hstack([cop_xy, pred_xy])
    rows = "\n".join(",".join(_FLOAT_FMT % v for v in row) for row in data)
    csv_path.write_text(header + "\n" + rows + "\n", encoding="utf-8")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "copforge"}):
        fig, ax = plt.subplots(figsize=(5, 6))
        ax.plot(cop_xy[:, 1], cop_xy[:, 0], lw=0.6, color="tab:blue",
                label="measured" if pred_xy is not None else None)
        if pred_xy is not None:
            ax.plot(pred_xy[:, 1], pred_xy[:, 0], lw=0.6, color="tab:orange",
                    label="predicted")
            ax.legend(loc="upper right")
        ax.set_xlabel("lateral y [mm]")
        ax.set_ylabel("anterior x [mm]")
        ax.set_title(title)
        ax.set_aspect("equal")
        ax.invert_xaxis()  # subject-left on the viewer's left
        svg_path = out_base.with_suffix(".svg")
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return csv_path, svg_path


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(_FLOAT_FMT % v if isinstance(v, float) else str(v) for v in row)
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_eval_report(result: IntraSubjectResult, out_dir: Path | str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    row = [
        result.subject_id,
        result.model_kind,
        result.channels.kinds,
        result.channels.history,
        result.constellation.to_string().replace(",", "+"),
        result.report.total,
        result.report.lateral,
        result.report.anterior,
        result.train_mse,
    ]
    csv_path = _write_csv(
        out_dir / "eval_report.csv",
        ["subject", "model", "channels", "history", "imus",
         "total_mm", "lateral_mm", "anterior_mm", "train_mse_mm2"],
        [row],
    )
    json_path = _write_json(
        out_dir / "eval_report.json",
        {
            "subject": result.subject_id,
            "model": result.model_kind,
            "channels": result.channels.kinds,
            "history": result.channels.history,
            "imus": result.constellation.to_string(),
            "rms": result.report.as_dict(),
            "train_mse_mm2": result.train_mse,
        },
    )
    return csv_path, json_path


def write_ablation_report(result: AblationResult, out_dir: Path | str) -> tuple[Path, Path, Path]:
    out_dir = Path(out_dir)
    rows = []
    for constellation in sorted(result.scores, key=lambda c: (len(c), c.sensors)):
        score = result.scores[constellation]
        rows.append(
            [
                constellation.to_string().replace(",", "+"),
                len(constellation),
                score.report.total,
                score.report.lateral,
                score.report.anterior,
                score.train_mse,
            ]
        )
    csv_path = _write_csv(
        out_dir / "ablation.csv",
        ["imus", "n_imus", "total_mm", "lateral_mm", "anterior_mm", "train_mse_mm2"],
        rows,
    )
    summary_rows = [
        [count, best.to_string().replace(",", "+"), result.scores[best].report.total,
         worst.to_string().replace(",", "+"), result.scores[worst].report.total]
        for count, best, worst in result.best_worst_by_count()
    ]
    summary_path = _write_csv(
        out_dir / "ablation_summary.csv",
        ["n_imus", "best_imus", "best_total_mm", "worst_imus", "worst_total_mm"],
        summary_rows,
    )
    json_path = _write_json(
        out_dir / "ablation.json",
        {
            "n_constellations": len(result.scores),
            "results": {
                c.to_string(): {**result.scores[c].report.as_dict(),
                                "train_mse_mm2": result.scores[c].train_mse}
                for c in sorted(result.scores, key=lambda c: (len(c), c.sensors))
            },
            "best_by_count": {
                str(count): best.to_string()
                for count, best, _ in result.best_worst_by_count()
            },
            "worst_by_count": {
                str(count): worst.to_string()
                for count, _, worst in result.best_worst_by_count()
            },
        },
    )
    return csv_path, summary_path, json_path


def write_traincurve_report(curve: TrainSizeCurve, out_dir: Path | str) -> tuple[Path, Path, Path]:
    out_dir = Path(out_dir)
    rows = []
    for size, reps in zip(curve.sizes_s, curve.reports):
        for rep_i, rep in enumerate(reps):
            rows.append([size, rep_i, rep.total, rep.lateral, rep.anterior])
    csv_path = _write_csv(
        out_dir / "traincurve.csv",
        ["size_s", "repeat", "total_mm", "lateral_mm", "anterior_mm"],
        rows,
    )
    mean = curve.mean_total()
    std = curve.std_total()
    summary_path = _write_csv(
        out_dir / "traincurve_summary.csv",
        ["size_s", "mean_total_mm", "std_total_mm"],
        [[s, float(m), float(d)] for s, m, d in zip(curve.sizes_s, mean, std)],
    )
    json_path = _write_json(
        out_dir / "traincurve.json",
        {
            "sizes_s": list(curve.sizes_s),
            "mean_total_mm": [float(v) for v in mean],
            "std_total_mm": [float(v) for v in std],
            "reports": [
                [r.as_dict() for r in reps] for reps in curve.reports
            ],
        },
    )
    return csv_path, summary_path, json_path


def write_transfer_report(results: list[TransferResult], out_dir: Path | str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    rows = []
    for res in results:
        rows.append([res.target_id, "A", res.rms_uncalibrated.total,
                     res.rms_uncalibrated.lateral, res.rms_uncalibrated.anterior])
        rows.append([res.target_id, "B", res.rms_calibrated.total,
                     res.rms_calibrated.lateral, res.rms_calibrated.anterior])
    csv_path = _write_csv(
        out_dir / "transfer.csv",
        ["target", "case", "total_mm", "lateral_mm", "anterior_mm"],
        rows,
    )
    json_path = _write_json(
        out_dir / "transfer.json",
        {
            res.target_id: {
                "A": res.rms_uncalibrated.as_dict(),
                "B": res.rms_calibrated.as_dict(),
            }
            for res in results
        },
    )
    return csv_path, json_path
