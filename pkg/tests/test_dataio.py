import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copforge.core import (
    ClockSkew,
    Constellation,
    CopFrame,
    ManifestMismatch,
    MissingSensor,
    NoTrigger,
    ParseError,
    SensorId,
    SpecTooLarge,
    UnitError,
    WrongFrame,
    validate,
)
from copforge.dataio import (
    ChannelSelection,
    ContiguousSeconds,
    PerStepFraction,
    SyncStream,
    build_features,
    contiguous_runs,
    load_recording,
    manifest_path_for,
    save_recording,
    split,
    split_mask,
    standardize,
    subset_recording,
    synchronize,
)
from copforge.experiments import ensure_pelvis
from copforge.synthgait import SynthGaitConfig, generate_recording


class TestRoundTrip:
    def test_save_load_preserves_everything(self, small_recording, tmp_path):
        path = save_recording(small_recording, tmp_path / "rec.csv")
        loaded = load_recording(path)
        assert validate(loaded) == []
        assert np.allclose(loaded.t, small_recording.t, atol=1e-9)
        assert np.allclose(loaded.cop.xy, small_recording.cop.xy, rtol=1e-8, atol=1e-8)
        for sensor in small_recording.imu:
            assert np.allclose(
                loaded.imu[sensor].gyro, small_recording.imu[sensor].gyro, rtol=1e-8, atol=1e-12
            )
        assert loaded.cop.frame == small_recording.cop.frame
        assert loaded.manifest == small_recording.manifest

    def test_rewrite_is_byte_identical(self, small_recording, tmp_path):
        p1 = save_recording(small_recording, tmp_path / "a.csv")
        p2 = save_recording(small_recording, tmp_path / "b.csv")
        assert p1.read_bytes() == p2.read_bytes()
        assert manifest_path_for(p1).read_bytes() == manifest_path_for(p2).read_bytes()

    def test_cop_in_meters_is_converted(self, small_recording, tmp_path):
        path = save_recording(small_recording, tmp_path / "rec.csv")
        mpath = manifest_path_for(path)
        meta = json.loads(mpath.read_text())
        meta["units"]["cop"] = "m"
        mpath.write_text(json.dumps(meta))
        # rewrite cop columns in meters
        import pandas as pd

        table = pd.read_csv(path)
        table["cop_x"] /= 1000.0
        table["cop_y"] /= 1000.0
        table.to_csv(path, index=False, float_format="%.12g")
        loaded = load_recording(path)
        assert np.allclose(loaded.cop.xy, small_recording.cop.xy, rtol=1e-6, atol=1e-6)

    def test_unknown_unit_tag(self, small_recording, tmp_path):
        path = save_recording(small_recording, tmp_path / "rec.csv")
        mpath = manifest_path_for(path)
        meta = json.loads(mpath.read_text())
        meta["units"]["gyro"] = "furlongs"
        mpath.write_text(json.dumps(meta))
        with pytest.raises(UnitError):
            load_recording(path)

    def test_missing_declared_sensor_columns(self, small_recording, tmp_path):
        path = save_recording(small_recording, tmp_path / "rec.csv")
        import pandas as pd

        table = pd.read_csv(path)
        table = table.drop(columns=[c for c in table.columns if c.startswith("imu8")])
        table.to_csv(path, index=False)
        with pytest.raises(ManifestMismatch):
            load_recording(path)

    def test_missing_manifest(self, small_recording, tmp_path):
        path = save_recording(small_recording, tmp_path / "rec.csv")
        manifest_path_for(path).unlink()
        with pytest.raises(ParseError):
            load_recording(path)


class TestSynchronize:
    @staticmethod
    def _streams(shift_s=0.0, fs_tm=250.0, skew=1.0, drop_fall=False):
        # 12 s of source signal, trigger window 1.0 .. 11.0 s
        t_imu = np.arange(0, 12.0, 0.01)
        sync_imu = ((t_imu >= 1.0) & (t_imu <= 11.0)).astype(float)
        signal = np.sin(2 * np.pi * 0.7 * t_imu) + 0.3 * np.sin(2 * np.pi * 1.3 * t_imu)
        imu_channels = {}
        for sensor in SensorId:
            for kind in "gam":
                for ax, off in zip("xyz", (0.0, 0.5, 1.0)):
                    imu_channels[f"imu{int(sensor)}_{kind}_{ax}"] = signal + off

        t_tm = np.arange(0, 12.0, 1.0 / fs_tm) * skew + shift_s
        src = (t_tm - shift_s) / skew  # true source time of each treadmill sample
        upper = np.inf if drop_fall else 11.0
        sync_tm = ((src >= 1.0) & (src <= upper)).astype(float)
        tm_channels = {
            "cop_x": np.sin(2 * np.pi * 0.7 * src),
            "cop_y": np.cos(2 * np.pi * 0.7 * src),
            "pelvis_x": 0.1 * src,
            "pelvis_y": -0.1 * src,
        }
        from copforge.core import Manifest, ProtocolStep, Source

        manifest = Manifest(
            subject_id="sync",
            mass_kg=75.0,
            height_cm=177.0,
            sample_rate_hz=100.0,
            protocol_steps=(ProtocolStep(0.5, 0.0, 10.0),),
            source=Source.Measured,
        )
        return (
            SyncStream(t=t_imu, sync=sync_imu, channels=imu_channels),
            SyncStream(t=t_tm, sync=sync_tm, channels=tm_channels),
            manifest,
        )

    def test_edges_at_1_and_11_give_1001_samples(self):
        imu, tm, manifest = self._streams()
        rec = synchronize(imu, tm, manifest)
        assert len(rec) == 1001
        assert validate(rec) == []

    def test_shifted_treadmill_clock_is_realigned(self):
        imu, tm, manifest = self._streams(shift_s=0.037)
        rec = synchronize(imu, tm, manifest)
        # residual lag between cop_x and the same sinusoid on the IMU grid
        truth = np.sin(2 * np.pi * 0.7 * (rec.t + 1.0))
        got = rec.cop.xy[:, 0]
        lags = np.arange(-10, 11)
        scores = [
            np.corrcoef(np.roll(got, lag)[20:-20], truth[20:-20])[0, 1] for lag in lags
        ]
        assert abs(lags[int(np.argmax(scores))]) * 10.0 < 5.0  # ms

    def test_missing_falling_edge(self):
        imu, tm, manifest = self._streams(drop_fall=True)
        with pytest.raises(NoTrigger):
            synchronize(imu, tm, manifest)

    def test_clock_skew_rejected(self):
        imu, tm, manifest = self._streams(skew=1.02)
        with pytest.raises(ClockSkew):
            synchronize(imu, tm, manifest)


class TestSplit:
    def test_per_step_fraction_takes_first_half_of_each_step(self, small_recording):
        train, test = split(small_recording, PerStepFraction(0.5))
        assert len(train) + len(test) == len(small_recording)
        labels = small_recording.step_label
        for step in np.unique(labels):
            idx = np.nonzero(labels == step)[0]
            k = int(round(0.5 * len(idx)))
            step_train = train.t[train.step_label == step]
            assert np.array_equal(step_train, small_recording.t[idx[:k]])

    def test_contiguous_seconds_exact_and_reproducible(self, small_recording):
        train1, _ = split(small_recording, ContiguousSeconds(10.0, seed=7))
        train2, _ = split(small_recording, ContiguousSeconds(10.0, seed=7))
        assert len(train1) == 1000
        assert np.array_equal(train1.t, train2.t)
        assert contiguous_runs(train1.t, 100.0).max() == 0  # one block

    def test_different_seeds_different_blocks_same_size(self, small_recording):
        m1 = split_mask(small_recording, ContiguousSeconds(10.0, seed=1))
        m2 = split_mask(small_recording, ContiguousSeconds(10.0, seed=2))
        assert m1.sum() == m2.sum() == 1000
        assert not np.array_equal(m1, m2)

    def test_spec_too_large(self, small_recording):
        with pytest.raises(SpecTooLarge):
            split(small_recording, ContiguousSeconds(10 * len(small_recording), seed=0))

    @given(
        fraction=st.floats(min_value=0.05, max_value=0.95),
        seconds=st.floats(min_value=0.5, max_value=25.0),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=30, deadline=None)
    def test_disjoint_and_covering_for_any_spec(self, fraction, seconds, seed):
        rec = _SPLIT_FIXTURE
        for spec in (PerStepFraction(fraction), ContiguousSeconds(seconds, seed)):
            mask = split_mask(rec, spec)
            train, test = split(rec, spec)
            assert len(train) + len(test) == len(rec)
            merged = np.sort(np.concatenate([train.t, test.t]))
            assert np.array_equal(merged, rec.t)
            assert mask.sum() == len(train)


_SPLIT_FIXTURE = generate_recording(SynthGaitConfig(duration_s=30.0, seed=1))


class TestFeatures:
    def test_dimension_formula_for_all_constellations(self, small_pelvis):
        short = subset_recording(small_pelvis, np.arange(40))
        for constellation in Constellation.all_nonempty():
            for kinds in ("gam", "ga"):
                for h in (0, 10):
                    sel = ChannelSelection(kinds, h)
                    fm, tm = build_features(short, constellation, sel)
                    assert fm.X.shape[1] == sel.n_features(constellation)
                    assert len(fm) == len(tm) == 40 - h

    def test_deterministic_bitwise(self, small_pelvis):
        sel = ChannelSelection("gam", 3)
        a, _ = build_features(small_pelvis, None, sel)
        b, _ = build_features(small_pelvis, None, sel)
        assert np.array_equal(a.X, b.X)
        assert a.columns == b.columns

    def test_lag_columns_are_shifted_copies(self, small_pelvis):
        sel = ChannelSelection("gam", 4)
        fm, _ = build_features(small_pelvis, None, sel)
        c0 = fm.columns.index("imu3_a_y_lag0")
        c2 = fm.columns.index("imu3_a_y_lag2")
        assert np.array_equal(fm.X[2:, c2], fm.X[:-2, c0])

    def test_rows_never_cross_gaps(self, small_pelvis):
        # remove a block in the middle; history rows at the seam must drop
        keep = np.concatenate([np.arange(0, 300), np.arange(500, 800)])
        gappy = subset_recording(small_pelvis, keep)
        fm, _ = build_features(gappy, None, ChannelSelection("gam", 10))
        assert len(fm) == 600 - 2 * 10
        assert set(np.unique(fm.run_id)) == {0, 1}

    def test_target_rows_align_with_cop_at_row_time(self, small_pelvis):
        fm, tm = build_features(small_pelvis, None, ChannelSelection("gam", 7))
        idx = np.searchsorted(small_pelvis.t, tm.row_time)
        assert np.array_equal(tm.Y, small_pelvis.cop.xy[idx])

    def test_missing_sensor_and_wrong_frame(self, small_recording, small_pelvis):
        with pytest.raises(WrongFrame):
            build_features(small_recording)  # treadmill frame
        only_back = dataclasses.replace(
            small_pelvis, imu={SensorId.Back: small_pelvis.imu[SensorId.Back]}
        )
        with pytest.raises(MissingSensor):
            build_features(only_back, Constellation.of(2, 3))

    def test_column_order_is_sensor_major_lag_innermost(self, small_pelvis):
        fm, _ = build_features(
            small_pelvis, Constellation.of(3, 2), ChannelSelection("ga", 1)
        )
        assert fm.columns[:4] == (
            "imu2_g_x_lag0",
            "imu2_g_x_lag1",
            "imu2_g_y_lag0",
            "imu2_g_y_lag1",
        )
        assert fm.columns[6] == "imu2_a_x_lag0"
        assert fm.columns[12] == "imu3_g_x_lag0"


class TestStandardize:
    def test_train_mean_zero_unit_std(self, small_pelvis):
        fm, _ = build_features(small_pelvis)
        (out,) = standardize(fm)
        assert np.abs(out.X.mean(axis=0)).max() < 1e-10
        # pitch-only segments leave a few channels exactly constant; those
        # pass through centered, everything else lands at unit spread
        varying = fm.X.std(axis=0) > 1e-12
        assert np.abs(out.X[:, varying].std(axis=0) - 1.0).max() < 1e-10
        assert np.abs(out.X[:, ~varying]).max() < 1e-10

    def test_constant_column_is_centered_not_divided(self):
        from copforge.dataio import standardization_stats

        x = np.column_stack([np.full(50, 5.0), np.arange(50.0)])
        mean, std = standardization_stats(x)
        assert std[0] == 1.0
        assert mean[0] == 5.0

    def test_same_stats_applied_to_others(self, small_pelvis):
        fm, _ = build_features(small_pelvis)
        half = dataclasses.replace(fm, X=fm.X[:100])
        train, other = standardize(fm, half)
        assert np.array_equal(other.X, train.X[:100])
        assert train.X[150, 7] == (fm.X[150, 7] - train.mean[7]) / train.std[7]
