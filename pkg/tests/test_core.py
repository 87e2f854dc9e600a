import dataclasses

import numpy as np
import pytest

from copforge.core import (
    Constellation,
    GamSeries,
    ParseError,
    SensorId,
    quat_normalize,
    validate,
)


class TestValidate:
    def test_well_formed_recording_is_clean(self, small_recording):
        assert validate(small_recording) == []

    def test_truncated_sensor_series_is_reported(self, small_recording):
        back = small_recording.imu[SensorId.Back]
        broken = dict(small_recording.imu)
        broken[SensorId.Back] = GamSeries(back.gyro[:-1], back.accel, back.mag)
        rec = dataclasses.replace(small_recording, imu=broken)
        findings = validate(rec)
        assert any("Back" in f and "gyro" in f and "length" in f for f in findings)

    def test_time_gap_is_reported_at_its_index(self, small_recording):
        t = small_recording.t.copy()
        t[500:] += 0.01  # one 20 ms gap between samples 499 and 500
        rec = dataclasses.replace(small_recording, t=t)
        findings = validate(rec)
        assert any("spacing" in f and "sample 500" in f for f in findings)

    def test_non_finite_sample_is_reported(self, small_recording):
        cop = small_recording.cop.xy.copy()
        cop[3, 0] = np.nan
        rec = dataclasses.replace(
            small_recording,
            cop=dataclasses.replace(small_recording.cop, xy=cop),
        )
        assert any("cop" in f and "sample 3" in f for f in validate(rec))


class TestQuatNormalize:
    def test_idempotent_bit_exact(self, rng):
        for _ in range(200):
            q = rng.normal(size=4) * rng.uniform(0.1, 10.0)
            once = quat_normalize(q)
            assert np.array_equal(quat_normalize(once), once)

    def test_norm_after_normalization(self, rng):
        q = quat_normalize(rng.normal(size=(1000, 4)))
        assert np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)) < 1e-9


class TestConstellation:
    def test_canonical_ordering(self):
        c = Constellation.of(8, 2, 5)
        assert [int(s) for s in c] == [2, 5, 8]

    def test_string_round_trip_is_stable(self):
        for c in Constellation.all_nonempty():
            assert Constellation.from_string(c.to_string()) == c

    def test_unordered_input_parses_to_same_constellation(self):
        assert Constellation.from_string("6, 3,2") == Constellation.of(2, 3, 6)

    def test_all_nonempty_has_127_unique_members(self):
        all_cs = list(Constellation.all_nonempty())
        assert len(all_cs) == 127
        assert len(set(all_cs)) == 127

    @pytest.mark.parametrize("bad", ["", "x", "9", "1", "2,,x"])
    def test_bad_strings_raise(self, bad):
        with pytest.raises(ParseError):
            Constellation.from_string(bad)
