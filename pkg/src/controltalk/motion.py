"""Implicit 3D keypoint motion model.

A face is parameterized by identity-specific canonical keypoints ``K_c``
(an ``(n_kp, 3)`` array in the normalized volume ``[-1, 1]^3``), a rigid
pose ``(R, T)``, and a per-keypoint expression deformation ``E``. The
posed keypoints are their affine combination

    K = R @ K_c + T + E

and expression edits are blended as ``E' = E + alpha * delta``. All
operations are pure torch functions in float64, differentiable with
respect to ``E`` and ``T``, and safe to call concurrently.

Motion sequences serialize to a little-endian binary stream: a 16-byte
header (uint32 version, uint32 n_kp, float64 fps) followed by one record
per frame of ``9 + 3 + n_kp*3`` float64 values (``R`` row-major, ``T``,
``E``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import torch

from .errors import DataError, DimensionError, ValidationError

DTYPE = torch.float64

MOTION_STREAM_VERSION = 1
_HEADER = struct.Struct("<IId")

ORTHONORMALITY_TOL = 1e-6


def as_points(x, name: str = "points") -> torch.Tensor:
    """Coerce to an (n, 3) float64 tensor, validating shape and finiteness."""
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.ndim != 2 or t.shape[1] != 3:
        raise DimensionError(f"{name} must have shape (n, 3), got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name} contains non-finite values")
    return t


@dataclass(frozen=True)
class Pose:
    """Rigid head pose: rotation matrix plus translation.

    ``R`` must be orthonormal with determinant +1 (checked to 1e-6).
    """

    R: torch.Tensor
    T: torch.Tensor

    def __post_init__(self):
        R = torch.as_tensor(self.R, dtype=DTYPE)
        T = torch.as_tensor(self.T, dtype=DTYPE).reshape(-1)
        if R.shape != (3, 3):
            raise DimensionError(f"rotation must be 3x3, got {tuple(R.shape)}")
        if T.shape != (3,):
            raise DimensionError(f"translation must be a 3-vector, got {tuple(T.shape)}")
        err = (R.T @ R - torch.eye(3, dtype=DTYPE)).abs().max().item()
        if err > ORTHONORMALITY_TOL:
            raise ValidationError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3e})")
        det = torch.linalg.det(R).item()
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise ValidationError(f"rotation determinant is {det:.6f}, expected 1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)


@dataclass(frozen=True)
class MotionParams:
    """Per-frame motion: pose plus expression deformation."""

    pose: Pose
    expression: torch.Tensor
    frame_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "expression", as_points(self.expression, "expression"))


def rotation_from_euler(yaw: float, pitch: float, roll: float) -> torch.Tensor:
    """Rotation matrix R = Rz(roll) @ Ry(yaw) @ Rx(pitch), angles in radians."""
    y = torch.as_tensor(yaw, dtype=DTYPE)
    p = torch.as_tensor(pitch, dtype=DTYPE)
    r = torch.as_tensor(roll, dtype=DTYPE)
    cy, sy = torch.cos(y), torch.sin(y)
    cp, sp = torch.cos(p), torch.sin(p)
    cr, sr = torch.cos(r), torch.sin(r)
    one = torch.ones((), dtype=DTYPE)
    zero = torch.zeros((), dtype=DTYPE)
    Rx = torch.stack([one, zero, zero, zero, cp, -sp, zero, sp, cp]).reshape(3, 3)
    Ry = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy]).reshape(3, 3)
    Rz = torch.stack([cr, -sr, zero, sr, cr, zero, zero, zero, one]).reshape(3, 3)
    return Rz @ Ry @ Rx


def compose_keypoints(canonical: torch.Tensor, motion: MotionParams) -> torch.Tensor:
    """Posed keypoints ``R @ K_c + T + E``; differentiable in E and T."""
    k_c = as_points(canonical, "canonical keypoints")
    e = motion.expression
    if e.shape[0] != k_c.shape[0]:
        raise DimensionError(
            f"expression has {e.shape[0]} keypoints, canonical has {k_c.shape[0]}"
        )
    return k_c @ motion.pose.R.T + motion.pose.T + e


def edit_expression(
    e: torch.Tensor,
    delta: torch.Tensor,
    alpha: float,
    allow_exaggeration: bool = False,
) -> torch.Tensor:
    """Blend an expression bias into e: returns ``e + alpha * delta``.

    alpha is the mouth-amplitude scale in [0, 1]; values above 1 produce
    exaggerated motion and require ``allow_exaggeration``.
    """
    e = torch.as_tensor(e, dtype=DTYPE)
    delta = torch.as_tensor(delta, dtype=DTYPE)
    if e.shape != delta.shape:
        raise DimensionError(f"expression shapes disagree: {tuple(e.shape)} vs {tuple(delta.shape)}")
    a = float(alpha)
    if a < 0:
        raise ValidationError(f"alpha must be non-negative, got {a}")
    if a > 1 and not allow_exaggeration:
        raise ValidationError(f"alpha={a} > 1 requires allow_exaggeration")
    return e + a * delta


def retarget_motion(source_canonical: torch.Tensor, driver_motion: MotionParams) -> MotionParams:
    """Reassociate a driver's pose and expression with another identity.

    Pure reassociation: the returned motion is the driver's, to be composed
    with the source identity's canonical keypoints.
    """
    k_c = as_points(source_canonical, "source canonical keypoints")
    if driver_motion.expression.shape[0] != k_c.shape[0]:
        raise DimensionError(
            f"driver motion has {driver_motion.expression.shape[0]} keypoints, "
            f"source identity has {k_c.shape[0]}"
        )
    return driver_motion


class Projected(NamedTuple):
    points: torch.Tensor  # (n_kp, 2) pixel coordinates, x then y
    clipped: torch.Tensor  # (n_kp,) bool, True where input left [-1, 1]


def project_points_raw(points: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """Unclamped orthographic pixel map: x in [-1,1] -> [0,W), y -> [0,H)."""
    h, w = image_size
    t = torch.as_tensor(points, dtype=DTYPE)
    scale = torch.tensor([w / 2.0, h / 2.0], dtype=DTYPE)
    return (t[..., :2] + 1.0) * scale


def project_keypoints(k: torch.Tensor, image_size: tuple[int, int]) -> Projected:
    """Orthographic projection to pixel coordinates, dropping z.

    Out-of-volume coordinates (|x| or |y| > 1) are clamped to the volume
    boundary and flagged per keypoint.
    """
    t = as_points(k, "composed keypoints")
    clipped = (t[:, :2].abs() > 1.0).any(dim=1)
    clamped = torch.cat([t[:, :2].clamp(-1.0, 1.0), t[:, 2:]], dim=1)
    return Projected(project_points_raw(clamped, image_size), clipped)


def save_motion_stream(
    path: str | Path,
    motions: Sequence[MotionParams],
    fps: float = 25.0,
) -> None:
    """Write a motion sequence in the binary stream format."""
    if not motions:
        raise DataError("cannot serialize an empty motion sequence")
    n_kp = motions[0].expression.shape[0]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MOTION_STREAM_VERSION, n_kp, float(fps)))
        for m in motions:
            if m.expression.shape[0] != n_kp:
                raise DimensionError("keypoint count varies across frames")
            rec = torch.cat([m.pose.R.reshape(-1), m.pose.T, m.expression.reshape(-1)])
            f.write(rec.numpy().astype("<f8").tobytes())


def load_motion_stream(path: str | Path) -> tuple[list[MotionParams], float]:
    """Read a motion stream; returns (motions, fps)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"motion stream {path} is truncated")
    version, n_kp, fps = _HEADER.unpack_from(raw)
    if version != MOTION_STREAM_VERSION:
        raise DataError(f"unsupported motion stream version {version}")
    body = raw[_HEADER.size:]
    rec_len = (9 + 3 + n_kp * 3) * 8
    if rec_len == 0 or len(body) % rec_len != 0:
        raise DataError(f"motion stream {path} has a partial frame record")
    import numpy as np

    values = np.frombuffer(body, dtype="<f8").reshape(-1, 9 + 3 + n_kp * 3)
    motions = []
    for i, row in enumerate(values):
        pose = Pose(
            R=torch.from_numpy(row[:9].reshape(3, 3).copy()),
            T=torch.from_numpy(row[9:12].copy()),
        )
        e = torch.from_numpy(row[12:].reshape(n_kp, 3).copy())
        motions.append(MotionParams(pose=pose, expression=e, frame_index=i))
    return motions, fps
