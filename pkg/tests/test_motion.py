import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from controltalk.errors import DataError, DimensionError, ValidationError
from controltalk.motion import (
    MotionParams,
    Pose,
    compose_keypoints,
    edit_expression,
    load_motion_stream,
    project_keypoints,
    retarget_motion,
    rotation_from_euler,
    save_motion_stream,
)


def identity_pose(t=(0.0, 0.0, 0.0)):
    return Pose(R=torch.eye(3, dtype=torch.float64), T=torch.tensor(t, dtype=torch.float64))


def finite_points(n=5, scale=0.8):
    return st.lists(
        st.tuples(
            st.floats(-scale, scale),
            st.floats(-scale, scale),
            st.floats(-scale, scale),
        ),
        min_size=n,
        max_size=n,
    ).map(lambda rows: torch.tensor(rows, dtype=torch.float64))


angles = st.floats(-math.pi, math.pi)


class TestCompose:
    def test_identity_pose_zero_expression_is_passthrough(self):
        k_c = torch.tensor([[0.1, -0.2, 0.3], [0.0, 0.5, -0.5]], dtype=torch.float64)
        m = MotionParams(pose=identity_pose(), expression=torch.zeros(2, 3))
        out = compose_keypoints(k_c, m)
        assert torch.equal(out, k_c)

    def test_translation_only(self):
        k_c = torch.zeros(3, 3, dtype=torch.float64)
        m = MotionParams(pose=identity_pose((0.1, 0.2, 0.3)), expression=torch.zeros(3, 3))
        out = compose_keypoints(k_c, m)
        assert torch.allclose(out, torch.tensor([[0.1, 0.2, 0.3]] * 3, dtype=torch.float64))

    def test_translation_lifts_along_z(self):
        k_c = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
        m = MotionParams(pose=identity_pose((0.0, 0.0, 1.0)), expression=torch.zeros(2, 3))
        out = compose_keypoints(k_c, m)
        expected = torch.tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]], dtype=torch.float64)
        assert torch.equal(out, expected)

    def test_translation_and_expression_cancellation(self):
        k_c = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        m = MotionParams(
            pose=identity_pose((-1.0, -2.0, -3.0)),
            expression=torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64),
        )
        out = compose_keypoints(k_c, m)
        assert torch.equal(out, torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64))

    def test_quarter_turn_about_z(self):
        # Hand-checked: Rz(90 deg) maps (1, 0, 0) -> (0, 1, 0).
        R = rotation_from_euler(0.0, 0.0, math.pi / 2)
        k_c = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        m = MotionParams(pose=Pose(R=R, T=torch.zeros(3)), expression=torch.zeros(1, 3))
        out = compose_keypoints(k_c, m)
        assert torch.allclose(out, torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64), atol=1e-12)

    def test_keypoint_count_mismatch_raises(self):
        k_c = torch.zeros(4, 3, dtype=torch.float64)
        m = MotionParams(pose=identity_pose(), expression=torch.zeros(5, 3))
        with pytest.raises(DimensionError):
            compose_keypoints(k_c, m)

    @given(finite_points(), finite_points(), angles, angles, angles)
    @settings(max_examples=50, deadline=None)
    def test_rotation_preserves_pairwise_distances(self, k_c, e, yaw, pitch, roll):
        R = rotation_from_euler(yaw, pitch, roll)
        m = MotionParams(pose=Pose(R=R, T=torch.zeros(3)), expression=torch.zeros_like(e))
        out = compose_keypoints(k_c + e, m)
        d_in = torch.cdist(k_c + e, k_c + e)
        d_out = torch.cdist(out, out)
        assert (d_in - d_out).abs().max() < 1e-6

    @given(finite_points(), finite_points(), finite_points())
    @settings(max_examples=30, deadline=None)
    def test_additive_in_expression(self, k_c, e1, e2):
        pose = identity_pose((0.05, -0.05, 0.0))
        a = compose_keypoints(k_c, MotionParams(pose=pose, expression=e1 + e2))
        b = compose_keypoints(k_c, MotionParams(pose=pose, expression=e1)) + e2
        assert torch.allclose(a, b, atol=1e-12)

    def test_gradient_wrt_expression_is_identity(self):
        # d(compose)/dE is the identity map; check via autograd against
        # a central finite difference.
        torch.manual_seed(0)
        k_c = torch.rand(4, 3, dtype=torch.float64) * 0.5
        e = (torch.rand(4, 3, dtype=torch.float64) * 0.1).requires_grad_(True)
        R = rotation_from_euler(0.3, -0.2, 0.1)
        m = MotionParams(pose=Pose(R=R, T=torch.tensor([0.01, 0.02, 0.03])), expression=e)
        out = compose_keypoints(k_c, m)
        g = torch.autograd.grad(out.sum(), e)[0]
        assert torch.allclose(g, torch.ones_like(g), atol=1e-12)

        eps = 1e-6
        with torch.no_grad():
            e0 = e.detach().clone()
            e0[2, 1] += eps
            up = compose_keypoints(k_c, MotionParams(pose=m.pose, expression=e0)).sum()
            e0[2, 1] -= 2 * eps
            dn = compose_keypoints(k_c, MotionParams(pose=m.pose, expression=e0)).sum()
        assert abs((up - dn).item() / (2 * eps) - 1.0) < 1e-6


class TestPoseValidation:
    def test_non_orthonormal_rotation_rejected(self):
        R = torch.eye(3, dtype=torch.float64)
        R[0, 0] = 1.5
        with pytest.raises(ValidationError):
            Pose(R=R, T=torch.zeros(3))

    def test_reflection_rejected(self):
        R = torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64))
        with pytest.raises(ValidationError):
            Pose(R=R, T=torch.zeros(3))

    @given(angles, angles, angles)
    @settings(max_examples=50, deadline=None)
    def test_euler_rotations_always_valid(self, yaw, pitch, roll):
        Pose(R=rotation_from_euler(yaw, pitch, roll), T=torch.zeros(3))

    @given(angles, angles, angles)
    @settings(max_examples=50, deadline=None)
    def test_euler_rotations_orthonormal_tight(self, yaw, pitch, roll):
        R = rotation_from_euler(yaw, pitch, roll)
        err = (R.T @ R - torch.eye(3, dtype=torch.float64)).abs().max()
        assert err < 1e-9

    def test_zero_angles_give_identity(self):
        assert torch.allclose(
            rotation_from_euler(0.0, 0.0, 0.0), torch.eye(3, dtype=torch.float64)
        )

    def test_half_turn_yaw_matches_closed_form(self):
        # Ry(pi) = [[-1,0,0],[0,1,0],[0,0,-1]] evaluated by hand.
        R = rotation_from_euler(math.pi, 0.0, 0.0)
        expected = torch.tensor(
            [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]], dtype=torch.float64
        )
        assert torch.allclose(R, expected, atol=1e-12)


class TestEditExpression:
    def test_alpha_zero_is_exact_noop(self):
        e = torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64)
        d = torch.tensor([[9.0, 9.0, 9.0]], dtype=torch.float64)
        assert torch.equal(edit_expression(e, d, 0.0), e)

    def test_alpha_one_is_exact_sum(self):
        e = torch.tensor([[0.1, -0.2, 0.0]], dtype=torch.float64)
        d = torch.tensor([[0.05, 0.05, -0.1]], dtype=torch.float64)
        assert torch.equal(edit_expression(e, d, 1.0), e + d)

    @given(
        finite_points(n=3),
        finite_points(n=3),
        st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]),
    )
    @settings(max_examples=40, deadline=None)
    def test_affine_in_alpha_on_dyadic_scales(self, e, d, alpha):
        # Dyadic alpha values make e + alpha*d exactly representable
        # relative to the two endpoint evaluations.
        out = edit_expression(e, d, alpha)
        assert torch.equal(out, e + alpha * d)

    @given(finite_points(n=3), finite_points(n=3), st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_affine_in_alpha_general(self, e, d, alpha):
        out = edit_expression(e, d, alpha)
        assert torch.allclose(out, e + alpha * d, atol=1e-12)

    def test_midpoint_blend(self):
        e = torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64)
        d = torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64)
        out = edit_expression(e, d, 0.5)
        assert torch.equal(out, torch.tensor([[3.0, 0.0, 0.0]], dtype=torch.float64))

    def test_exaggeration_guard(self):
        e = torch.zeros(1, 3, dtype=torch.float64)
        d = torch.ones(1, 3, dtype=torch.float64)
        with pytest.raises(ValidationError):
            edit_expression(e, d, 1.5)
        out = edit_expression(e, d, 1.5, allow_exaggeration=True)
        assert torch.allclose(out, 1.5 * d)

    def test_negative_alpha_rejected(self):
        e = torch.zeros(1, 3, dtype=torch.float64)
        with pytest.raises(ValidationError):
            edit_expression(e, e, -0.1)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            edit_expression(torch.zeros(2, 3), torch.zeros(3, 3), 0.5)


class TestRetarget:
    def test_returns_driver_motion_for_source_identity(self):
        driver = MotionParams(
            pose=identity_pose((0.1, 0.0, 0.0)),
            expression=torch.full((6, 3), 0.02, dtype=torch.float64),
        )
        src = torch.rand(6, 3, dtype=torch.float64) - 0.5
        out = retarget_motion(src, driver)
        assert out is driver
        composed = compose_keypoints(src, out)
        assert torch.allclose(composed, src + 0.02 + torch.tensor([0.1, 0.0, 0.0]))

    def test_keypoint_count_mismatch(self):
        driver = MotionParams(pose=identity_pose(), expression=torch.zeros(6, 3))
        with pytest.raises(DimensionError):
            retarget_motion(torch.zeros(5, 3), driver)


class TestProjection:
    def test_center_maps_to_image_center(self):
        out = project_keypoints(torch.zeros(1, 3, dtype=torch.float64), (64, 64))
        assert torch.allclose(out.points, torch.tensor([[32.0, 32.0]], dtype=torch.float64))
        assert not out.clipped.any()

    def test_corners(self):
        k = torch.tensor([[-1.0, -1.0, 0.0], [1.0, 1.0, 0.5]], dtype=torch.float64)
        out = project_keypoints(k, (64, 128))
        assert torch.allclose(
            out.points, torch.tensor([[0.0, 0.0], [128.0, 64.0]], dtype=torch.float64)
        )

    def test_halfway_point_maps_linearly(self):
        k = torch.tensor([[0.5, 0.0, 0.3]], dtype=torch.float64)
        out = project_keypoints(k, (64, 64))
        assert out.points[0, 0].item() == 48.0
        assert out.points[0, 1].item() == 32.0

    def test_out_of_volume_is_clamped_and_flagged(self):
        k = torch.tensor([[1.5, 0.0, 0.0], [0.0, 0.2, 3.0]], dtype=torch.float64)
        out = project_keypoints(k, (64, 64))
        assert out.clipped.tolist() == [True, False]  # z never clips
        assert torch.allclose(out.points[0], torch.tensor([64.0, 32.0], dtype=torch.float64))

    @given(finite_points(n=4, scale=1.0))
    @settings(max_examples=30, deadline=None)
    def test_projection_in_pixel_bounds(self, k):
        out = project_keypoints(k, (48, 96))
        assert (out.points[:, 0] >= 0).all() and (out.points[:, 0] <= 96).all()
        assert (out.points[:, 1] >= 0).all() and (out.points[:, 1] <= 48).all()

    def test_resolution_scaling_is_linear(self):
        k = torch.tensor([[0.25, -0.5, 0.1]], dtype=torch.float64)
        lo = project_keypoints(k, (64, 64)).points
        hi = project_keypoints(k, (128, 128)).points
        assert torch.allclose(hi, 2.0 * lo)


class TestMotionStream:
    def test_round_trip_bit_exact(self, tmp_path):
        torch.manual_seed(1)
        motions = []
        for i in range(7):
            R = rotation_from_euler(0.1 * i, -0.05 * i, 0.02)
            motions.append(
                MotionParams(
                    pose=Pose(R=R, T=torch.rand(3, dtype=torch.float64) * 0.1),
                    expression=torch.rand(20, 3, dtype=torch.float64) * 0.05,
                    frame_index=i,
                )
            )
        p = tmp_path / "clip.motion"
        save_motion_stream(p, motions, fps=25.0)
        loaded, fps = load_motion_stream(p)
        assert fps == 25.0
        assert len(loaded) == 7
        for a, b in zip(motions, loaded):
            assert torch.equal(a.pose.R, b.pose.R)
            assert torch.equal(a.pose.T, b.pose.T)
            assert torch.equal(a.expression, b.expression)

    def test_header_layout(self, tmp_path):
        m = MotionParams(pose=identity_pose(), expression=torch.zeros(2, 3))
        p = tmp_path / "clip.motion"
        save_motion_stream(p, [m], fps=30.0)
        raw = p.read_bytes()
        assert len(raw) == 16 + (9 + 3 + 6) * 8
        import struct

        version, n_kp, fps = struct.unpack_from("<IId", raw)
        assert (version, n_kp, fps) == (1, 2, 30.0)

    def test_truncated_stream_raises(self, tmp_path):
        m = MotionParams(pose=identity_pose(), expression=torch.zeros(2, 3))
        p = tmp_path / "clip.motion"
        save_motion_stream(p, [m], fps=25.0)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(DataError):
            load_motion_stream(p)

    def test_empty_sequence_rejected(self, tmp_path):
        with pytest.raises(DataError):
            save_motion_stream(tmp_path / "x.motion", [], fps=25.0)
