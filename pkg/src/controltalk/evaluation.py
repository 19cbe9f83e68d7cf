"""Metric suite and end-to-end evaluation reports.

Image quality (SSIM), geometric accuracy (projected-keypoint distances
for mouth and whole face), audio-visual alignment (mean sync-expert
cosine), and mouth-aperture correlation against the corpus oracle — all
computed per clip and aggregated into a serializable report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .audio import AudioFeatureSequence
from .checkpoint import state_dict_hash
from .corpus import (
    MOUTH_INDICES,
    N_KP,
    Clip,
    aperture_oracle,
    compose_batch,
    render_motion,
    stack_motion,
)
from .errors import ConfigError, DataError, DimensionError
from .model import Audio2Exp, InferenceConfig, infer_sequence
from .motion import MotionParams, project_points_raw, retarget_motion
from .renderer import Frame
from .sync import SYNC_WINDOW, SyncExpert, crop_and_resize, mouth_boxes_for_motion

DTYPE = torch.float64

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0

_ssim_kernel_cache: torch.Tensor | None = None


def _ssim_kernel() -> torch.Tensor:
    """Normalized 11x11 Gaussian window, sigma 1.5."""
    global _ssim_kernel_cache
    if _ssim_kernel_cache is None:
        half = (SSIM_WINDOW - 1) // 2
        x = torch.arange(-half, half + 1, dtype=DTYPE)
        g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
        g = g / g.sum()
        _ssim_kernel_cache = (g[:, None] * g[None, :]).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    return _ssim_kernel_cache


def _to_gray(img) -> torch.Tensor:
    """Frame or (H, W[, 3]) tensor -> (H, W) grayscale by channel mean."""
    if isinstance(img, Frame):
        img = img.pixels
    t = torch.as_tensor(img, dtype=DTYPE)
    if t.ndim == 3 and t.shape[-1] == 3:
        t = t.mean(dim=-1)
    if t.ndim != 2:
        raise DimensionError(f"image must be (H, W) or (H, W, 3), got {tuple(t.shape)}")
    return t


def ssim(a, b) -> float:
    """Structural similarity between two same-size images.

    Grayscale by channel mean; 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, dynamic range 1.0; mean over positions where the
    window fits entirely inside the image.
    """
    x, y = _to_gray(a), _to_gray(b)
    if x.shape != y.shape:
        raise DimensionError(f"image sizes disagree: {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape) < SSIM_WINDOW:
        raise DataError(
            f"image {tuple(x.shape)} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    k = _ssim_kernel()
    x4, y4 = x[None, None], y[None, None]
    mu_x = F.conv2d(x4, k)
    mu_y = F.conv2d(y4, k)
    var_x = F.conv2d(x4 * x4, k) - mu_x**2
    var_y = F.conv2d(y4 * y4, k) - mu_y**2
    cov = F.conv2d(x4 * y4, k) - mu_x * mu_y
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


_SUBSETS = {"mouth": list(MOUTH_INDICES), "face": list(range(N_KP))}


def landmark_distance(
    pred_motion: Sequence[MotionParams],
    gt_motion: Sequence[MotionParams],
    canonical: torch.Tensor,
    gt_canonical: torch.Tensor | None = None,
    subset: str = "face",
    size: tuple[int, int] = (64, 64),
) -> float:
    """Mean Euclidean distance (pixels) between projected keypoints.

    Both sequences are composed with their canonical geometry (gt reuses
    ``canonical`` unless ``gt_canonical`` is given), projected without
    clamping, and compared over the chosen keypoint subset and every
    frame.
    """
    if subset not in _SUBSETS:
        raise ConfigError(f"subset must be one of {sorted(_SUBSETS)}, got {subset!r}")
    if len(pred_motion) != len(gt_motion):
        raise DimensionError(
            f"motion lengths disagree: {len(pred_motion)} vs {len(gt_motion)}"
        )
    if len(pred_motion) == 0:
        raise DataError("empty motion sequences")
    idx = _SUBSETS[subset]
    kp = project_points_raw(compose_batch(canonical, *stack_motion(pred_motion)), size)
    gt_c = canonical if gt_canonical is None else gt_canonical
    kg = project_points_raw(compose_batch(gt_c, *stack_motion(gt_motion)), size)
    d = torch.linalg.vector_norm(kp[:, idx] - kg[:, idx], dim=-1)
    return float(d.mean())


def sync_score(
    frames: Sequence[Frame],
    audio: AudioFeatureSequence,
    expert: SyncExpert,
    identity,
    motion: Sequence[MotionParams],
    margin: int = 5,
) -> float:
    """Mean sync-expert cosine over all valid 5-frame windows of a clip.

    Higher is better; 1 - sync_score is the distance-style reading.
    Mouth crops come from pose-only boxes derived from ``motion`` (the
    same identity/pose stream that produced ``frames``).
    """
    n = len(frames)
    if n < SYNC_WINDOW:
        raise DataError(f"clip has {n} frames, below the sync window {SYNC_WINDOW}")
    if audio.n_frames != n or len(motion) != n:
        raise DimensionError(
            f"frames ({n}), audio ({audio.n_frames}) and motion ({len(motion)}) "
            "lengths disagree"
        )
    boxes = mouth_boxes_for_motion(identity, motion, frames[0].size, margin)
    with torch.no_grad():
        crops = torch.stack(
            [crop_and_resize(f.pixels, b) for f, b in zip(frames, boxes)]
        )
        half = (SYNC_WINDOW - 1) // 2
        centers = torch.arange(half, n - half)
        win = centers[:, None] + torch.arange(-half, half + 1)
        cos = expert.cosine(crops[win], audio.features[win])
    return float(cos.mean())


def sync_score_clip(clip: Clip, expert: SyncExpert, margin: int = 5) -> float:
    """sync_score of a corpus clip's own ground-truth frames."""
    if clip.frames is None:
        raise DataError(f"clip {clip.name} has no frames to score")
    return sync_score(clip.frames, clip.audio, expert, clip.identity, clip.motion, margin)


def pearson(x, y, tol: float = 1e-12) -> tuple[float, bool]:
    """Pearson correlation with a degeneracy flag.

    Returns (r, False) normally; (0.0, True) when either input is
    (numerically) constant, where the coefficient is undefined.
    """
    xt = torch.as_tensor(x, dtype=DTYPE).reshape(-1)
    yt = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
    if xt.shape != yt.shape:
        raise DimensionError(f"lengths disagree: {len(xt)} vs {len(yt)}")
    if len(xt) < 2:
        raise DataError("correlation needs at least two samples")
    xc, yc = xt - xt.mean(), yt - yt.mean()
    sx = torch.linalg.vector_norm(xc)
    sy = torch.linalg.vector_norm(yc)
    if float(sx) < tol or float(sy) < tol:
        return 0.0, True
    r = float((xc @ yc) / (sx * sy))
    return max(-1.0, min(1.0, r)), False


def masked_pixel_error(frames_a: Sequence[Frame], frames_b: Sequence[Frame],
                       masks: Sequence[torch.Tensor], outside: bool = True) -> float:
    """Mean absolute pixel difference inside (or outside) per-frame masks."""
    if not (len(frames_a) == len(frames_b) == len(masks)):
        raise DimensionError("frame/mask counts disagree")
    total = weight = 0.0
    for fa, fb, m in zip(frames_a, frames_b, masks):
        keep = (1.0 - m) if outside else m
        diff = (fa.pixels - fb.pixels).abs().mean(dim=-1) * keep
        total += float(diff.sum())
        weight += float(keep.sum())
    if weight == 0:
        raise DataError("mask leaves no pixels to compare")
    return total / weight


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation-run settings; alpha 1.0 exercises full editing strength."""

    alpha: float = 1.0
    use_silent_prepass: bool = True
    include_cross_id: bool = True
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")


METRIC_KEYS = ("ssim", "m_ldm", "f_ldm", "sync_cos", "sync_dist", "aperture_correlation")


@dataclass
class EvalReport:
    """Per-clip metrics, their means, and enough context to reproduce them."""

    per_clip: dict[str, dict]
    aggregate: dict
    config: dict
    checkpoint_hash: str
    fid: str = "n/a"
    aperture_curves: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "per_clip": self.per_clip,
            "aggregate": self.aggregate,
            "config": self.config,
            "checkpoint_hash": self.checkpoint_hash,
            "fid": self.fid,
        }

    def save(self, out_dir: str | Path) -> Path:
        """Write report.json plus one per-frame aperture CSV per clip."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "report.json"
        report_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        for name, curves in self.aperture_curves.items():
            with open(out / f"{name}_aperture.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["frame", "predicted", "oracle"])
                for t, (p, o) in enumerate(zip(curves["predicted"], curves["oracle"])):
                    writer.writerow([t, f"{p:.12g}", f"{o:.12g}"])
        return report_path


def _cross_driver(clips: Sequence[Clip], i: int) -> Clip | None:
    """First clip after i (cyclically) with a different identity."""
    for step in range(1, len(clips)):
        other = clips[(i + step) % len(clips)]
        if other.identity.seed != clips[i].identity.seed:
            return other
    return None


def evaluate(
    model: Audio2Exp,
    expert: SyncExpert,
    clips: Sequence[Clip],
    cfg: EvalConfig | None = None,
) -> EvalReport:
    """Score a model over test clips: same-ID editing plus cross-ID driving.

    Same-ID: each clip's pose stream and audio drive its own identity
    from a neutral (closed-mouth) base expression; outputs are compared
    against the clip's ground truth. Cross-ID: the clip's identity is
    driven by another identity's motion and audio, and the resulting
    aperture curve is correlated with the driver's oracle.
    """
    cfg = cfg or EvalConfig()
    if len(clips) == 0:
        raise DataError("no clips to evaluate")
    icfg = InferenceConfig(alpha=cfg.alpha, use_silent_prepass=cfg.use_silent_prepass,
                           allow_exaggeration=cfg.alpha > 1)
    per_clip: dict[str, dict] = {}
    curves: dict = {}
    for i, clip in enumerate(clips):
        if clip.frames is not None and clip.frames[0].size == cfg.image_size:
            gt_frames = clip.frames
        else:
            gt_frames = render_motion(clip.identity, clip.motion, cfg.image_size)
        edited, aperture = infer_sequence(
            model, clip.identity, clip.motion, clip.audio, icfg
        )
        pred_frames = render_motion(clip.identity, edited, cfg.image_size)
        oracle = aperture_oracle(clip.audio)
        r, degenerate = pearson(aperture, oracle)
        cos = float(sync_score(pred_frames, clip.audio, expert, clip.identity, edited))
        row = {
            "ssim": float(sum(ssim(p, g) for p, g in zip(pred_frames, gt_frames))) / len(gt_frames),
            "m_ldm": float(landmark_distance(edited, clip.motion, clip.identity.canonical,
                                             subset="mouth", size=cfg.image_size)),
            "f_ldm": float(landmark_distance(edited, clip.motion, clip.identity.canonical,
                                             subset="face", size=cfg.image_size)),
            "sync_cos": cos,
            "sync_dist": 1.0 - cos,
            "aperture_correlation": r,
            "aperture_degenerate": degenerate,
        }
        curves[clip.name] = {
            "predicted": [float(v) for v in aperture],
            "oracle": [float(v) for v in oracle],
        }
        if cfg.include_cross_id:
            driver = _cross_driver(clips, i)
            if driver is not None:
                retargeted = [
                    retarget_motion(clip.identity.canonical, m) for m in driver.motion
                ]
                _, ap_x = infer_sequence(
                    model, clip.identity, retargeted, driver.audio, icfg
                )
                r_x, _ = pearson(ap_x, aperture_oracle(driver.audio))
                row["cross_id_driver"] = driver.name
                row["cross_id_aperture_correlation"] = r_x
        per_clip[clip.name] = row

    aggregate = {
        key: sum(row[key] for row in per_clip.values()) / len(per_clip)
        for key in METRIC_KEYS
    }
    cross = [row["cross_id_aperture_correlation"] for row in per_clip.values()
             if "cross_id_aperture_correlation" in row]
    if cross:
        aggregate["cross_id_aperture_correlation"] = sum(cross) / len(cross)
    return EvalReport(
        per_clip=per_clip,
        aggregate=aggregate,
        config={**asdict(cfg), "image_size": list(cfg.image_size)},
        checkpoint_hash=state_dict_hash(model.state_dict()),
        aperture_curves=curves,
    )
