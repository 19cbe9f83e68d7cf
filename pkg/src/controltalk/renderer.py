"""Differentiable Gaussian-splat renderer.

Each keypoint contributes an isotropic Gaussian blob of its own color
and radius; blobs accumulate additively over the background and the sum
is clamped to [0, 1]. Crude as imagery, but every pixel is a smooth
function of the keypoint positions, so image-space losses propagate
gradients back to expression deltas. The renderer sits behind a plain
function interface so a learned substitute could drop in.

Frames export as PNG; clips export as a directory of numbered PNGs plus
an ``index.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError, DimensionError, ValidationError
from .motion import as_points, project_points_raw

DTYPE = torch.float64

DEFAULT_SIZE = (64, 64)


@dataclass(frozen=True)
class IdentityAppearance:
    """Per-keypoint splat color/radius plus a background color."""

    colors: torch.Tensor  # (n_kp, 3) in [0, 1]
    radii: torch.Tensor  # (n_kp,) pixels, > 0
    background: torch.Tensor  # (3,) in [0, 1]

    def __post_init__(self):
        c = torch.as_tensor(self.colors, dtype=DTYPE)
        r = torch.as_tensor(self.radii, dtype=DTYPE).reshape(-1)
        b = torch.as_tensor(self.background, dtype=DTYPE).reshape(-1)
        if c.ndim != 2 or c.shape[1] != 3:
            raise DimensionError(f"colors must be (n_kp, 3), got {tuple(c.shape)}")
        if r.shape[0] != c.shape[0]:
            raise DimensionError("radii count disagrees with color count")
        if b.shape != (3,):
            raise DimensionError("background must be a 3-vector")
        if c.min() < 0 or c.max() > 1 or b.min() < 0 or b.max() > 1:
            raise ValidationError("colors must lie in [0, 1]")
        if (r <= 0).any():
            raise ValidationError("splat radii must be positive")
        object.__setattr__(self, "colors", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "background", b)

    @property
    def n_kp(self) -> int:
        return self.colors.shape[0]


@dataclass(frozen=True)
class Frame:
    """A rendered image: (H, W, 3) float in [0, 1]."""

    pixels: torch.Tensor

    def __post_init__(self):
        p = torch.as_tensor(self.pixels, dtype=DTYPE)
        if p.ndim != 3 or p.shape[2] != 3:
            raise DimensionError(f"pixels must be (H, W, 3), got {tuple(p.shape)}")
        if not torch.isfinite(p).all():
            raise ValidationError("frame contains non-finite pixels")
        if p.min() < 0 or p.max() > 1:
            raise ValidationError("frame pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def _pixel_grid(size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    h, w = size
    ys = torch.arange(h, dtype=DTYPE)
    xs = torch.arange(w, dtype=DTYPE)
    return xs, ys


def splat_images(
    keypoints: torch.Tensor, app: IdentityAppearance, size: tuple[int, int] = DEFAULT_SIZE
) -> torch.Tensor:
    """Unclamped batched splat accumulation: (B, n_kp, 3) -> (B, H, W, 3).

    Pixel centers sit at integer coordinates; keypoints project
    orthographically (z dropped, no position clamping) so gradients flow
    for every keypoint, on-screen or off.
    """
    k = torch.as_tensor(keypoints, dtype=DTYPE)
    if k.ndim == 2:
        k = k[None]
    if k.ndim != 3 or k.shape[-1] != 3:
        raise DimensionError(f"keypoints must be (B, n_kp, 3), got {tuple(k.shape)}")
    if k.shape[1] != app.n_kp:
        raise DimensionError(
            f"appearance has {app.n_kp} keypoints, got {k.shape[1]} positions"
        )
    h, w = size
    p2d = project_points_raw(k, (h, w))  # (B, n_kp, 2), x then y
    xs, ys = _pixel_grid(size)
    dx2 = (xs[None, None, :] - p2d[..., 0:1]) ** 2  # (B, n_kp, W)
    dy2 = (ys[None, None, :] - p2d[..., 1:2]) ** 2  # (B, n_kp, H)
    inv = 1.0 / (2.0 * app.radii**2)  # (n_kp,)
    gx = torch.exp(-dx2 * inv[None, :, None])  # separable Gaussian
    gy = torch.exp(-dy2 * inv[None, :, None])
    weights = gy[:, :, :, None] * gx[:, :, None, :]  # (B, n_kp, H, W)
    img = torch.einsum("bkhw,kc->bhwc", weights, app.colors)
    return img + app.background


def render(
    k: torch.Tensor, app: IdentityAppearance, size: tuple[int, int] = DEFAULT_SIZE
) -> Frame:
    """Render one composed-keypoint set to a clamped frame."""
    img = splat_images(as_points(k, "composed keypoints"), app, size)[0]
    return Frame(pixels=img.clamp(0.0, 1.0))


def mouth_mask(
    k2d: torch.Tensor,
    mouth_indices: Sequence[int],
    margin: int = 4,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> torch.Tensor:
    """Binary (H, W) mask over the dilated mouth bounding box.

    The box is the axis-aligned hull of the given projected keypoints,
    grown by ``margin`` pixels on every side; pixels whose integer
    centers fall inside are 1.
    """
    idx = list(mouth_indices)
    if not idx:
        raise DataError("mouth_mask requires a non-empty index set")
    pts = torch.as_tensor(k2d, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"projected keypoints must be (n, 2), got {tuple(pts.shape)}")
    if min(idx) < 0 or max(idx) >= pts.shape[0]:
        raise DataError(f"mouth index out of range for {pts.shape[0]} keypoints")
    sel = pts[idx]
    x_lo, x_hi = sel[:, 0].min() - margin, sel[:, 0].max() + margin
    y_lo, y_hi = sel[:, 1].min() - margin, sel[:, 1].max() + margin
    xs, ys = _pixel_grid(size)
    in_x = (xs >= x_lo) & (xs <= x_hi)
    in_y = (ys >= y_lo) & (ys <= y_hi)
    return (in_y[:, None] & in_x[None, :]).to(DTYPE)


def mouth_aperture(k: torch.Tensor, upper_idx: int, lower_idx: int) -> torch.Tensor:
    """Euclidean distance between the upper- and lower-lip keypoints."""
    pts = torch.as_tensor(k, dtype=DTYPE)
    n = pts.shape[0]
    for i in (upper_idx, lower_idx):
        if not 0 <= i < n:
            raise DataError(f"lip keypoint index {i} out of range for {n} keypoints")
    return torch.linalg.vector_norm(pts[upper_idx] - pts[lower_idx])


def frame_to_png(frame: Frame, path: str | Path) -> None:
    arr = (frame.pixels.detach().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def png_to_frame(path: str | Path) -> Frame:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise DataError(f"frame image not found: {path}") from None
    return Frame(pixels=torch.from_numpy(arr))


def save_clip_frames(directory: str | Path, frames: Sequence[Frame], fps: float = 25.0) -> None:
    """Write a clip as numbered PNGs plus an index.json manifest."""
    if not frames:
        raise DataError("cannot export an empty clip")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, fr in enumerate(frames):
        name = f"{i:06d}.png"
        frame_to_png(fr, d / name)
        names.append(name)
    h, w = frames[0].size
    index = {"fps": fps, "frames": names, "size": [h, w]}
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_clip_frames(directory: str | Path) -> tuple[list[Frame], float]:
    d = Path(directory)
    index_path = d / "index.json"
    if not index_path.exists():
        raise DataError(f"clip directory {d} has no index.json")
    index = json.loads(index_path.read_text())
    frames = [png_to_frame(d / name) for name in index["frames"]]
    return frames, float(index["fps"])
