import numpy as np
import pytest

from copforge.core import CopFrame, CopSeries, SensorId, WrongFrame, quat_normalize
from copforge.kinematics import (
    CollinearMarkers,
    DegenerateObservations,
    ReferenceFields,
    SeriesTooShort,
    apply_fixed_rotation,
    hemisphere_align,
    integrate_gyro,
    load_alignment,
    markers_to_orientation,
    quat_angular_distance,
    quat_conjugate,
    quat_from_axis_angle,
    quat_from_rotvec,
    quat_multiply,
    quat_rotate,
    quat_series_to_gyro,
    quat_to_am,
    quest_recover,
    quest_recover_series,
    to_pelvis_frame,
)
from copforge.core import ParseError

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def random_unit_quat(rng, n=None):
    shape = (4,) if n is None else (n, 4)
    return quat_normalize(rng.normal(size=shape))


def rotation_matrix_oracle(q):
    """Independent quaternion -> matrix expansion for cross-checks."""
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


class TestQuatAlgebra:
    def test_identity_is_neutral(self, rng):
        q = random_unit_quat(rng)
        assert np.allclose(quat_multiply(IDENTITY, q), q, atol=1e-15)
        assert np.allclose(quat_multiply(q, IDENTITY), q, atol=1e-15)

    def test_conjugate_inverts(self, rng):
        q = random_unit_quat(rng)
        prod = quat_multiply(q, quat_conjugate(q))
        assert quat_angular_distance(prod, IDENTITY) < 1e-12

    def test_two_quarter_turns_make_a_half_turn(self):
        q90 = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        q180_oracle = quat_from_axis_angle([0, 0, 1], np.pi)
        assert quat_angular_distance(quat_multiply(q90, q90), q180_oracle) < 1e-12

    def test_rotate_identity(self):
        assert np.allclose(quat_rotate(IDENTITY, [1.0, 0, 0]), [1, 0, 0])

    def test_rotate_quarter_turn_about_z(self):
        q90 = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        assert np.allclose(quat_rotate(q90, [1.0, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_rotate_matches_matrix_oracle(self, rng):
        for _ in range(100):
            q = random_unit_quat(rng)
            v = rng.normal(size=3)
            assert np.allclose(quat_rotate(q, v), rotation_matrix_oracle(q) @ v, atol=1e-12)

    def test_rotate_preserves_norms_and_angles(self, rng):
        q = random_unit_quat(rng)
        a, b = rng.normal(size=(2, 3))
        ra, rb = quat_rotate(q, a), quat_rotate(q, b)
        assert abs(np.linalg.norm(ra) - np.linalg.norm(a)) < 1e-9
        assert abs(np.dot(ra, rb) - np.dot(a, b)) < 1e-9


class TestMarkers:
    def test_axis_aligned_triplet_gives_identity(self):
        # axis-aligned triangle, sized well above the 1 mm^2 degeneracy floor
        q = markers_to_orientation([0, 0, 0], [10, 0, 0], [0, 10, 0])
        assert quat_angular_distance(q, IDENTITY) < 1e-12

    def test_rigidly_rotated_triplet_recovers_the_rotation(self, rng):
        base = np.array([[10.0, 20.0, 5.0], [110.0, 20.0, 5.0], [10.0, 120.0, 5.0]])
        for _ in range(50):
            q = random_unit_quat(rng)
            moved = quat_rotate(q, base)
            recovered = markers_to_orientation(moved[0], moved[1], moved[2])
            assert quat_angular_distance(recovered, q) < 1e-9

    def test_equivariance_under_rotation(self, rng):
        p = rng.normal(scale=100.0, size=(3, 3))
        q0 = markers_to_orientation(p[0], p[1], p[2])
        r = random_unit_quat(rng)
        q1 = markers_to_orientation(*quat_rotate(r, p))
        assert quat_angular_distance(q1, quat_multiply(r, q0)) < 1e-9

    def test_collinear_markers_raise_with_sample_index(self):
        with pytest.raises(CollinearMarkers, match="sample 0"):
            markers_to_orientation([0, 0, 0], [1, 0, 0], [2, 0, 0])

    def test_fixed_rotation_identity_and_round_trip(self, rng):
        q = random_unit_quat(rng)
        fix = quat_from_axis_angle([1, 0, 0], np.pi / 2)
        assert np.allclose(apply_fixed_rotation(q, IDENTITY), q, atol=1e-15)
        back = apply_fixed_rotation(apply_fixed_rotation(q, fix), quat_conjugate(fix))
        assert quat_angular_distance(back, q) < 1e-12


class TestGyro:
    def test_constant_orientation_gives_zero_rate(self):
        qs = np.tile(IDENTITY, (50, 1))
        assert np.abs(quat_series_to_gyro(qs, 0.01)).max() == 0.0

    def test_constant_rate_about_body_z(self):
        t = np.arange(500) * 0.01
        qs = quat_from_axis_angle(np.tile([0.0, 0, 1], (500, 1)), t)
        omega = quat_series_to_gyro(qs, 0.01)
        assert np.abs(omega - [0, 0, 1.0]).max() < 1e-4

    def test_matches_angle_differencing_oracle(self, rng):
        t = np.arange(800) * 0.01
        rv = np.stack(
            [
                0.6 * np.sin(2 * np.pi * 0.4 * t),
                0.9 * np.sin(2 * np.pi * 0.3 * t + 0.5),
                0.4 * np.sin(2 * np.pi * 0.55 * t + 1.2),
            ],
            axis=-1,
        )
        qs = quat_from_rotvec(rv)
        omega = quat_series_to_gyro(qs, 0.01)

        # independent oracle: body-frame axis-angle of q_k^-1 * q_{k+1} per step
        rel = quat_multiply(quat_conjugate(qs[:-1]), qs[1:])
        angle = 2.0 * np.arctan2(np.linalg.norm(rel[:, 1:], axis=1), rel[:, 0])
        axis = rel[:, 1:] / np.maximum(np.linalg.norm(rel[:, 1:], axis=1), 1e-30)[:, None]
        oracle = axis * (angle / 0.01)[:, None]
        peak = np.linalg.norm(oracle, axis=1).max()
        err = np.linalg.norm(omega[1:-1] - 0.5 * (oracle[1:] + oracle[:-1]), axis=1)
        assert err.max() < 0.01 * peak

    def test_series_too_short(self):
        with pytest.raises(SeriesTooShort):
            quat_series_to_gyro(IDENTITY[None, :], 0.01)

    def test_sign_flips_are_transparent(self, rng):
        t = np.arange(300) * 0.01
        qs = quat_from_axis_angle(np.tile([0.0, 1, 0], (300, 1)), 0.8 * np.sin(t))
        flipped = qs.copy()
        flipped[::7] *= -1.0
        assert np.allclose(
            quat_series_to_gyro(flipped, 0.01), quat_series_to_gyro(qs, 0.01), atol=1e-12
        )

    def test_integration_recovers_terminal_orientation(self):
        # 10 s of smooth motion; first-order integration of the extracted
        # rates must land within 0.01 rad of the true terminal orientation
        t = np.arange(1000) * 0.01
        rv = np.stack(
            [
                0.5 * np.sin(2 * np.pi * 0.4 * t),
                0.8 * np.sin(2 * np.pi * 0.3 * t + 0.5),
                0.3 * np.sin(2 * np.pi * 0.5 * t + 1.0),
            ],
            axis=-1,
        )
        qs = quat_from_rotvec(rv)
        omega = quat_series_to_gyro(qs, 0.01)
        integrated = integrate_gyro(qs[0], omega[:-1], 0.01)
        assert quat_angular_distance(qs[-1], integrated[-1]) < 0.01


class TestStaticChannels:
    def test_identity_orientation(self):
        ref = ReferenceFields()
        accel, mag = quat_to_am(IDENTITY, ref)
        assert np.allclose(accel, [0, 0, 9.81])
        assert np.allclose(mag, ref.mag_world)

    def test_upside_down(self):
        accel, _ = quat_to_am(quat_from_axis_angle([1, 0, 0], np.pi), ReferenceFields())
        assert np.allclose(accel, [0, 0, -9.81], atol=1e-12)

    def test_inverse_rotation_recovers_up(self, rng):
        ref = ReferenceFields()
        q = random_unit_quat(rng)
        accel, _ = quat_to_am(q, ref)
        assert np.allclose(quat_rotate(q, accel), [0, 0, 9.81], atol=1e-9)

    def test_mag_stays_unit(self, rng):
        _, mag = quat_to_am(random_unit_quat(rng, 200), ReferenceFields())
        assert np.abs(np.linalg.norm(mag, axis=1) - 1.0).max() < 1e-9


class TestQuest:
    def test_identity_round_trip(self):
        ref = ReferenceFields()
        accel, mag = quat_to_am(IDENTITY, ref)
        assert quat_angular_distance(quest_recover(accel, mag, ref), IDENTITY) < 1e-9

    def test_randomized_round_trip_1000(self, rng):
        ref = ReferenceFields()
        qs = random_unit_quat(rng, 1000)
        accel, mag = quat_to_am(qs, ref)
        recovered = quest_recover_series(accel, mag, ref)
        assert quat_angular_distance(qs, recovered).max() < 1e-6
        # scalar path agrees
        one = quest_recover(accel[17], mag[17], ref)
        assert quat_angular_distance(one, qs[17]) < 1e-6

    def test_parallel_observations_raise(self):
        ref = ReferenceFields()
        with pytest.raises(DegenerateObservations):
            quest_recover([0, 0, 9.81], [0, 0, 1.0], ref)

    def test_near_half_turn_orientations(self, rng):
        ref = ReferenceFields()
        for axis in ([1, 0, 0], [0, 1, 0], [0.6, -0.8, 0]):
            q = quat_from_axis_angle(axis, np.pi - 1e-9)
            accel, mag = quat_to_am(q, ref)
            assert quat_angular_distance(quest_recover(accel, mag, ref), q) < 1e-6


class TestPelvisFrame:
    def test_translation_arithmetic(self):
        cop = CopSeries(xy=np.array([[100.0, 50.0], [120.0, 40.0]]), frame=CopFrame.Treadmill)
        pelvis = np.array([[100.0, 50.0], [100.0, 50.0]])
        out = to_pelvis_frame(cop, pelvis)
        assert out.frame is CopFrame.Pelvis
        assert np.allclose(out.xy, [[0, 0], [20, -10]])

    def test_wrong_frame_rejected(self):
        cop = CopSeries(xy=np.zeros((3, 2)), frame=CopFrame.Pelvis)
        with pytest.raises(WrongFrame):
            to_pelvis_frame(cop, np.zeros((3, 2)))

    def test_inverse_translation_is_identity(self, rng):
        xy = rng.normal(size=(50, 2)) * 30
        pelvis = rng.normal(size=(50, 2)) * 10
        out = to_pelvis_frame(CopSeries(xy=xy, frame=CopFrame.Treadmill), pelvis)
        assert np.allclose(out.xy + pelvis, xy, atol=1e-12)

    def test_yaw_variant_rotates(self):
        cop = CopSeries(xy=np.array([[1.0, 0.0]]), frame=CopFrame.Treadmill)
        out = to_pelvis_frame(cop, np.zeros((1, 2)), yaw_rad=np.array([np.pi / 2]))
        assert np.allclose(out.xy, [[0.0, -1.0]], atol=1e-12)


class TestAlignmentFile:
    def test_parse_and_default_identity(self, tmp_path):
        path = tmp_path / "align.txt"
        path.write_text("# fixed rotations\n2 = 0, 0, 1, 90\n\n5 = 1,0,0, -10\n")
        rots = load_alignment(path)
        assert set(rots) == {SensorId.Back, SensorId.RFoot}
        assert quat_angular_distance(
            rots[SensorId.Back], quat_from_axis_angle([0, 0, 1], np.pi / 2)
        ) < 1e-12

    def test_bad_line_raises_with_location(self, tmp_path):
        path = tmp_path / "align.txt"
        path.write_text("2 = 0 0 1 90\n")
        with pytest.raises(ParseError, match="align.txt:1"):
            load_alignment(path)


def test_hemisphere_align_makes_dots_nonnegative(rng):
    qs = random_unit_quat(rng, 100)
    qs[::3] *= -1
    aligned = hemisphere_align(qs)
    assert (np.sum(aligned[:-1] * aligned[1:], axis=1) >= 0).all()
