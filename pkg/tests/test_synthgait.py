import dataclasses

import numpy as np
import pytest

from copforge.core import ConfigInvalid, SensorId, validate
from copforge.kinematics import (
    ReferenceFields,
    quat_angular_distance,
    quest_recover_series,
    to_pelvis_frame,
)
from copforge.synthgait import (
    ButterflyParams,
    ProtocolStep,
    SynthGaitConfig,
    butterfly_cop,
    default_protocol,
    generate_cohort,
    generate_recording,
    random_mount_offsets,
)


class TestButterfly:
    def test_periodic_in_two_pi(self):
        theta = np.linspace(0, 2 * np.pi, 17)
        assert np.allclose(butterfly_cop(theta), butterfly_cop(theta + 2 * np.pi), atol=1e-9)

    def test_mirror_symmetry_without_asymmetry(self):
        theta = np.linspace(0, 2 * np.pi, 5001)
        trace = butterfly_cop(theta)
        shifted = butterfly_cop(theta + np.pi)
        assert np.abs(shifted - trace * [1.0, -1.0]).max() < 1e-9

    def test_asymmetry_skews_left_lobe_by_the_given_ratio(self):
        theta = np.linspace(0, 2 * np.pi, 200001)
        trace = butterfly_cop(theta, asymmetry=0.3)
        ratio = trace[:, 1].max() / -trace[:, 1].min()
        assert abs(ratio - 1.3) < 0.013

    def test_anterior_has_larger_range_than_lateral(self):
        theta = np.linspace(0, 2 * np.pi, 10001)
        trace = butterfly_cop(theta)
        assert np.ptp(trace[:, 0]) > np.ptp(trace[:, 1])

    def test_bad_parameters_rejected(self):
        with pytest.raises(ConfigInvalid):
            butterfly_cop(np.zeros(3), asymmetry=1.5)
        with pytest.raises(ConfigInvalid):
            butterfly_cop(np.zeros(3), ButterflyParams(smoothing=0.9))


class TestGenerateRecording:
    def test_validates_clean(self, small_recording):
        assert validate(small_recording) == []

    def test_pelvis_round_trip_recovers_clean_butterfly(self, clean_recording_truth):
        rec, truth = clean_recording_truth
        recovered = to_pelvis_frame(rec.cop, rec.pelvis_xy)
        assert np.abs(recovered.xy - truth.cop_pelvis).max() < 1e-9

    def test_noise_level_is_calibrated(self):
        cfg0 = SynthGaitConfig(duration_s=120.0, seed=1, noise_frac=0.0)
        cfg3 = SynthGaitConfig(duration_s=120.0, seed=1, noise_frac=0.03)
        clean = generate_recording(cfg0)
        noisy = generate_recording(cfg3)
        ratios = []
        for sensor in SensorId:
            for kind in ("gyro", "accel", "mag"):
                c = getattr(clean.imu[sensor], kind)
                n = getattr(noisy.imu[sensor], kind)
                for j in range(3):
                    sig = np.std(c[:, j])
                    if sig > 1e-12:
                        ratios.append(np.std(n[:, j] - c[:, j]) / sig)
        ratios = np.array(ratios)
        assert np.all(np.abs(ratios - 0.03) < 0.005)

    def test_mount_offsets_change_gam_but_not_cop(self, rng):
        base = SynthGaitConfig(duration_s=20.0, seed=3)
        offsets = random_mount_offsets(rng, max_deg=8.0)
        a = generate_recording(base)
        b = generate_recording(dataclasses.replace(base, mount_offsets=offsets))
        assert np.array_equal(a.cop.xy, b.cop.xy)
        assert np.array_equal(a.pelvis_xy, b.pelvis_xy)
        assert not np.allclose(a.imu[SensorId.Back].accel, b.imu[SensorId.Back].accel)

    def test_quest_recovers_generating_orientations(self, clean_recording_truth):
        rec, truth = clean_recording_truth
        ref = ReferenceFields()
        for sensor in (SensorId.Back, SensorId.RShank, SensorId.LFoot):
            q = quest_recover_series(rec.imu[sensor].accel, rec.imu[sensor].mag, ref)
            assert quat_angular_distance(truth.quat[sensor], q).max() < 1e-6

    def test_stride_periodicity_in_autocorrelation(self):
        cfg = SynthGaitConfig(
            duration_s=60.0, seed=2, noise_frac=0.0,
            protocol_steps=(ProtocolStep(0.5, 0.0, 60.0),),
        )
        rec, truth = generate_recording(cfg, return_truth=True)
        cop = truth.cop_pelvis - truth.cop_pelvis.mean(axis=0)
        n = len(cop)
        ac = sum(np.correlate(cop[:, j], cop[:, j], "full")[n - 1 :] for j in range(2))
        stride_samples = 100.0 / 0.9  # cadence 1.8 steps/s at reference speed
        lo, hi = 30, int(1.5 * stride_samples)
        peak = lo + int(np.argmax(ac[lo:hi]))
        assert abs(peak - stride_samples) <= 1.0

    def test_standing_steps_freeze_the_gait(self):
        cfg = SynthGaitConfig(
            duration_s=40.0, seed=6, noise_frac=0.0,
            protocol_steps=(ProtocolStep(0.0, 0.0, 20.0), ProtocolStep(0.5, 0.0, 20.0)),
        )
        rec, truth = generate_recording(cfg, return_truth=True)
        standing = slice(0, 1500)  # clear of the smoothed transition
        assert np.abs(truth.cop_pelvis[standing]).max() < 1e-9
        assert np.abs(np.diff(truth.phase[standing])).max() < 1e-12
        gyro = rec.imu[SensorId.RThigh].gyro[standing]
        assert np.abs(gyro).max() < 1e-9

    def test_determinism_bitwise(self):
        cfg = SynthGaitConfig(duration_s=15.0, seed=11)
        a = generate_recording(cfg)
        b = generate_recording(cfg)
        assert np.array_equal(a.cop.xy, b.cop.xy)
        for sensor in a.imu:
            assert np.array_equal(a.imu[sensor].gyro, b.imu[sensor].gyro)

    def test_config_validation(self):
        with pytest.raises(ConfigInvalid):
            generate_recording(SynthGaitConfig(duration_s=10.0, noise_frac=-0.1))
        with pytest.raises(ConfigInvalid):
            generate_recording(SynthGaitConfig(duration_s=-5.0))
        with pytest.raises(ConfigInvalid):
            default_protocol(0.0, 0.5)


class TestCohort:
    def test_members_are_distinct_and_valid(self):
        recs = generate_cohort(4, SynthGaitConfig(duration_s=15.0), seed=5)
        assert [r.manifest.subject_id for r in recs] == ["S1", "S2", "S3", "S4"]
        for rec in recs:
            assert validate(rec) == []
        for i in range(4):
            for j in range(i + 1, 4):
                a = recs[i].imu[SensorId.Back].accel
                b = recs[j].imu[SensorId.Back].accel
                assert not np.allclose(a, b)

    def test_same_seed_bit_identical(self):
        cfg = SynthGaitConfig(duration_s=10.0)
        a = generate_cohort(2, cfg, seed=9)
        b = generate_cohort(2, cfg, seed=9)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.cop.xy, rb.cop.xy)
            assert np.array_equal(ra.imu[SensorId.LFoot].mag, rb.imu[SensorId.LFoot].mag)

    def test_patient_gaitogram_is_more_asymmetric(self):
        recs = generate_cohort(3, SynthGaitConfig(duration_s=60.0, noise_frac=0.0), seed=4, n_patients=1)
        def lobe_ratio(rec):
            cop = to_pelvis_frame(rec.cop, rec.pelvis_xy).xy
            return cop[:, 1].max() / -cop[:, 1].min()
        healthy = lobe_ratio(recs[0])
        patient = lobe_ratio(recs[-1])
        assert recs[-1].manifest.subject_id.startswith("P")
        assert patient > healthy + 0.15

    def test_cohort_size_guard(self):
        with pytest.raises(ConfigInvalid):
            generate_cohort(1, SynthGaitConfig(duration_s=10.0), seed=0)
