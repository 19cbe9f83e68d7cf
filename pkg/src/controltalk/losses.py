"""Training losses: masked two-scale perceptual distance plus lip-sync cosine.

The perceptual loss compares frozen random-convolution features of the
generated and reference frames at full and half resolution, with the
mouth region masked out of both images first — identity and pose live
everywhere on the face, lip sync only in the mouth, and the two losses
must not fight over the same pixels. The sync loss is ``1 - cos(V, A)``
between video and audio embeddings, so minimizing it pushes the pair
toward alignment. The total is their weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

DTYPE = torch.float64

FEATURE_WIDTHS = (8, 16, 32, 64)
LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and guards.

    lambda_sync defaults to 0.3: larger values trade visual fidelity for
    mouth accuracy, and 0.3 sits at the knee of that curve.
    """

    lambda_p: float = 1.0
    lambda_sync: float = 0.3
    eps: float = 1e-8
    mouth_margin_px: int = 4

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_sync < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.eps <= 0:
            raise ValidationError("eps must be positive")
        if self.mouth_margin_px < 0:
            raise ValidationError("mouth margin must be non-negative")


class FeatureExtractor(torch.nn.Module):
    """Frozen stack of M random-orthogonal conv stages.

    Stage = 3x3 conv -> leaky ReLU -> 2x average pool, widths
    (8, 16, 32, 64). Weights come from a seeded QR factorization and
    never train; the stack is a fixed measuring stick, not a model.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = FEATURE_WIDTHS):
        super().__init__()
        self.widths = tuple(widths)
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for out_ch in self.widths:
            conv = torch.nn.Conv2d(in_ch, out_ch, 3, padding=1, dtype=DTYPE)
            fan_in = in_ch * 9
            flat = torch.randn(fan_in, out_ch, generator=gen, dtype=DTYPE)
            q, _ = torch.linalg.qr(flat)  # fan_in >= out_ch for these widths
            with torch.no_grad():
                conv.weight.copy_(q.T.reshape(out_ch, in_ch, 3, 3))
                conv.bias.zero_()
            convs.append(conv)
            in_ch = out_ch
        self.stages = torch.nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage feature maps for (B, H, W, 3) images."""
        min_side = 2 ** len(self.stages)
        if images.shape[1] < min_side or images.shape[2] < min_side:
            raise DimensionError(
                f"images must be at least {min_side}x{min_side} for "
                f"{len(self.stages)} pooling stages, got {tuple(images.shape[1:3])}"
            )
        x = images.permute(0, 3, 1, 2)
        feats = []
        for conv in self.stages:
            x = F.avg_pool2d(F.leaky_relu(conv(x), LEAKY_SLOPE), 2)
            feats.append(x)
        return feats


def _half_resolution(images: torch.Tensor) -> torch.Tensor:
    """2x average pooling of (B, H, W, 3) images."""
    return F.avg_pool2d(images.permute(0, 3, 1, 2), 2).permute(0, 2, 3, 1)


def perceptual_loss(
    y: torch.Tensor,
    d: torch.Tensor,
    mask: torch.Tensor,
    fx: FeatureExtractor,
) -> torch.Tensor:
    """Mouth-masked two-scale feature distance between y and d.

    Accepts single (H, W, 3) frames or batches (B, H, W, 3) with a
    matching (H, W) or (B, H, W) mask of ones over the mouth box. Both
    images are multiplied by (1 - mask), pooled once for the half-scale
    pair, and the mean absolute feature difference is averaged over the
    2M (stage, scale) combinations. Differentiable in y.
    """
    if y.ndim == 3:
        y, d = y[None], d[None]
    if mask.ndim == 2:
        mask = mask[None]
    if y.shape != d.shape:
        raise DimensionError(f"frame shapes disagree: {tuple(y.shape)} vs {tuple(d.shape)}")
    if mask.shape != y.shape[:3]:
        raise DimensionError(f"mask shape {tuple(mask.shape)} does not cover frames")
    keep = (1.0 - mask)[..., None]
    ym, dm = y * keep, d * keep
    ym_half, dm_half = _half_resolution(ym), _half_resolution(dm)
    total = ym.new_zeros(())
    m = fx.n_stages
    for fy, fd in zip(fx(ym), fx(dm)):
        total = total + (fy - fd).abs().mean()
    for fy, fd in zip(fx(ym_half), fx(dm_half)):
        total = total + (fy - fd).abs().mean()
    return total / (2 * m)


def sync_loss(v: torch.Tensor, a: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """1 - cosine similarity, with eps guarding zero-norm embeddings.

    Batched inputs (B, D) average over the batch; range [0, 2].
    """
    if v.shape != a.shape:
        raise DimensionError(f"embedding shapes disagree: {tuple(v.shape)} vs {tuple(a.shape)}")
    if v.ndim == 1:
        v, a = v[None], a[None]
    dot = (v * a).sum(dim=-1)
    norms = torch.linalg.vector_norm(v, dim=-1) * torch.linalg.vector_norm(a, dim=-1)
    cos = dot / norms.clamp_min(eps)
    return (1.0 - cos).mean()


def total_loss(lp: torch.Tensor, lsync: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Weighted sum of the perceptual and sync components."""
    return cfg.lambda_p * lp + cfg.lambda_sync * lsync
