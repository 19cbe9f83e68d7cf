"""Audio-visual sync expert: paired encoders judging lip/audio alignment.

The video encoder embeds 5 consecutive 32x32 mouth crops (stacked
channelwise) through 3 conv+pool stages and a linear head; the audio
encoder embeds the matching 5-frame feature window through two fully
connected layers. Both land on the unit sphere in 64-d, trained
contrastively with binary cross-entropy on (cos+1)/2 — aligned pairs
are positives, temporally shifted or cross-clip pairs are negatives.

Two auxiliary regression terms shape the embedding geometry so that the
fixed decision threshold at cosine 0 separates pairs:

* the audio tower is pulled toward an analytic code of its own input —
  random Fourier features of the window's loudness curve, plus one
  constant bias coordinate.  Cosines of such codes approximate a
  Gaussian kernel on loudness curves, so nearby curves embed acutely
  and distant curves orthogonally;
* the video tower is pulled toward the code of its aligned audio, with
  the bias coordinate's sign flipped.  The opposite signs turn the
  kernel threshold into the cosine-zero threshold: matched pairs score
  about ``1 - 2*tau`` and mismatched pairs about ``-tau``.

Both targets are functions of the training inputs themselves (no labels
beyond the aligned/misaligned pairing), and the BCE term remains free
to calibrate the boundary.  Once trained the expert is frozen:
downstream training treats its cosine as the definition of "in sync",
and evaluation reports the same score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .audio import LOG_FLOOR
from .corpus import MOUTH_INDICES, Clip, compose_batch, stack_motion
from .errors import ConfigError, DataError, DimensionError, NumericError
from .motion import project_points_raw

DTYPE = torch.float64

EMBED_DIM = 64
CROP_SIZE = 32
SYNC_WINDOW = 5

# Geometry of the analytic anchor codes (see module docstring).  The
# kernel bandwidth is in loudness-curve units (each coordinate lives in
# [0, 1)); tau sets where mismatched pairs land relative to cosine 0.
ANCHOR_SIGMA = 0.18
ANCHOR_TAU = 0.35
_RFF_DIM = EMBED_DIM - 1
_LOG_MEL_FLOOR = math.log(LOG_FLOOR)


def mouth_crop_box(
    k2d: torch.Tensor,
    margin: int = 4,
    size: tuple[int, int] = (64, 64),
    mouth_indices=MOUTH_INDICES,
) -> tuple[int, int, int, int]:
    """Integer (y0, y1, x0, x1) crop bounds around the projected mouth.

    Bounds are inclusive-exclusive, clamped to the image, and never
    degenerate. Box location is ground-truth geometry, not a learned
    quantity, so callers may treat it as constant during backprop.
    """
    h, w = size
    sel = k2d[list(mouth_indices)]
    x0 = int(torch.floor(sel[:, 0].min()).item()) - margin
    x1 = int(torch.ceil(sel[:, 0].max()).item()) + margin + 1
    y0 = int(torch.floor(sel[:, 1].min()).item()) - margin
    y1 = int(torch.ceil(sel[:, 1].max()).item()) + margin + 1
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(max(x1, x0 + 2), w), min(max(y1, y0 + 2), h)
    x0, y0 = min(x0, x1 - 2), min(y0, y1 - 2)
    return y0, y1, x0, x1


def crop_and_resize(
    image: torch.Tensor, box: tuple[int, int, int, int], out_size: int = CROP_SIZE
) -> torch.Tensor:
    """(H, W, 3) image + box -> (3, out, out); differentiable in pixels."""
    y0, y1, x0, x1 = box
    patch = image[y0:y1, x0:x1].permute(2, 0, 1)[None]
    resized = F.interpolate(patch, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return resized[0]


class SyncExpert(torch.nn.Module):
    """Two-tower embedding model over mouth crops and audio windows.

    Embeddings are unit-normalized, so ``cosine`` is a plain dot
    product.  The random-feature projection and the loudness knee used
    by the audio conditioning live in buffers: they are part of the
    checkpoint and of the frozen-weights hash.
    """

    def __init__(
        self,
        d_a: int = 80,
        window: int = SYNC_WINDOW,
        seed: int = 0,
        conv_channels: tuple[int, int, int] = (16, 32, 64),
        audio_hidden: int = 256,
        anchor_sigma: float = ANCHOR_SIGMA,
    ):
        super().__init__()
        if window % 2 == 0 or window < 1:
            raise ConfigError(f"sync window must be odd and positive, got {window}")
        if anchor_sigma <= 0:
            raise ConfigError(f"anchor bandwidth must be positive, got {anchor_sigma}")
        self.d_a = d_a
        self.window = window
        self.seed = seed
        self.conv_channels = tuple(conv_channels)
        self.audio_hidden = audio_hidden
        self.anchor_sigma = anchor_sigma
        kw = {"dtype": DTYPE}
        c1, c2, c3 = self.conv_channels
        self.v_conv1 = torch.nn.Conv2d(3 * window, c1, 3, padding=1, **kw)
        self.v_conv2 = torch.nn.Conv2d(c1, c2, 3, padding=1, **kw)
        self.v_conv3 = torch.nn.Conv2d(c2, c3, 3, padding=1, **kw)
        self.v_head = torch.nn.Linear(c3 * (CROP_SIZE // 8) ** 2, EMBED_DIM, **kw)
        # audio conditioning: normalized log-mels + loudness curve + its
        # random Fourier features, all deterministic functions of the input
        self.a_fc1 = torch.nn.Linear(window * d_a + window + _RFF_DIM, audio_hidden, **kw)
        self.a_fc2 = torch.nn.Linear(audio_hidden, EMBED_DIM, **kw)

        gen = torch.Generator().manual_seed(seed)
        for layer in (self.v_conv1, self.v_conv2, self.v_conv3, self.v_head,
                      self.a_fc1, self.a_fc2):
            fan_in = layer.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.zero_()
        self.register_buffer(
            "rff_omega",
            torch.randn(window, _RFF_DIM, generator=gen, dtype=DTYPE) / anchor_sigma,
        )
        self.register_buffer(
            "rff_phase",
            torch.rand(_RFF_DIM, generator=gen, dtype=DTYPE) * 2.0 * math.pi,
        )
        # loudness scale; set from data by training, stored with the weights
        self.register_buffer("energy_knee", torch.tensor(100.0, dtype=DTYPE))

    # ----------------------------------------------------------- towers

    def loudness_curve(self, windows: torch.Tensor) -> torch.Tensor:
        """(..., window, d_a) log-mels -> (..., window) squashed loudness."""
        e2 = torch.exp(windows).sum(dim=-1)
        return e2 / (e2 + self.energy_knee**2)

    def _rff(self, curve: torch.Tensor) -> torch.Tensor:
        z = torch.cos(curve @ self.rff_omega + self.rff_phase)
        return z / torch.linalg.vector_norm(z, dim=-1, keepdim=True).clamp_min(1e-12)

    def anchor_codes(self, windows: torch.Tensor, side: float = -1.0) -> torch.Tensor:
        """Analytic embedding targets for audio windows.

        ``side`` is the sign of the constant bias coordinate: -1 for the
        audio tower's own target, +1 for the video tower's target (the
        product of opposite signs shifts mismatched cosines below zero).
        """
        z = self._rff(self.loudness_curve(windows))
        bias = torch.full(
            z.shape[:-1] + (1,), side * math.sqrt(ANCHOR_TAU), dtype=DTYPE
        )
        return torch.cat([z * math.sqrt(1.0 - ANCHOR_TAU), bias], dim=-1)

    def encode_video(self, crops: torch.Tensor) -> torch.Tensor:
        """(B, window, 3, 32, 32) or unbatched -> (B, 64) unit embedding."""
        squeeze = crops.ndim == 4
        if squeeze:
            crops = crops[None]
        if (
            crops.ndim != 5
            or crops.shape[1] != self.window
            or crops.shape[2] != 3
            or crops.shape[3:] != (CROP_SIZE, CROP_SIZE)
        ):
            raise DimensionError(
                f"expected (B, {self.window}, 3, {CROP_SIZE}, {CROP_SIZE}) crops, "
                f"got {tuple(crops.shape)}"
            )
        b = crops.shape[0]
        x = crops.reshape(b, 3 * self.window, crops.shape[3], crops.shape[4]) - 0.5
        x = F.avg_pool2d(F.relu(self.v_conv1(x)), 2)
        x = F.avg_pool2d(F.relu(self.v_conv2(x)), 2)
        x = F.avg_pool2d(F.relu(self.v_conv3(x)), 2)
        out = self.v_head(x.reshape(b, -1))
        out = out / torch.linalg.vector_norm(out, dim=-1, keepdim=True).clamp_min(1e-12)
        return out[0] if squeeze else out

    def encode_audio(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, window, d_a) or unbatched -> (B, 64) unit embedding."""
        squeeze = windows.ndim == 2
        if squeeze:
            windows = windows[None]
        if windows.ndim != 3 or windows.shape[1:] != (self.window, self.d_a):
            raise DimensionError(
                f"expected (B, {self.window}, {self.d_a}) audio windows, "
                f"got {tuple(windows.shape)}"
            )
        b = windows.shape[0]
        curve = self.loudness_curve(windows)
        cond = torch.cat(
            [
                (windows.reshape(b, -1) - _LOG_MEL_FLOOR) / (-_LOG_MEL_FLOOR),
                curve,
                self._rff(curve),
            ],
            dim=1,
        )
        h = torch.tanh(self.a_fc1(cond))
        out = self.a_fc2(h)
        out = out / torch.linalg.vector_norm(out, dim=-1, keepdim=True).clamp_min(1e-12)
        return out[0] if squeeze else out

    def cosine(self, crops: torch.Tensor, windows: torch.Tensor) -> torch.Tensor:
        v = self.encode_video(crops)
        a = self.encode_audio(windows)
        if v.ndim == 1:
            v, a = v[None], a[None]
        return (v * a).sum(dim=-1)

    def init_args(self) -> dict:
        return {
            "d_a": self.d_a,
            "window": self.window,
            "seed": self.seed,
            "conv_channels": list(self.conv_channels),
            "audio_hidden": self.audio_hidden,
            "anchor_sigma": self.anchor_sigma,
        }


@dataclass(frozen=True)
class SyncTrainConfig:
    """Expert training recipe: contrastive BCE plus the anchor terms."""

    epochs: int = 14
    batch_size: int = 128
    learning_rate: float = 2e-3
    warmup_epochs: int = 2
    holdout_fraction: float = 0.25
    min_offset: int = 5
    target_accuracy: float = 0.85
    stop_accuracy: float = 0.92
    anchor_weight: float = 1.0
    video_anchor_weight: float = 1.0
    anchor_sigma: float = ANCHOR_SIGMA
    anchor_schedule: str = "constant"  # or "cosine": fade the anchors out
    conv_channels: tuple[int, int, int] = (16, 32, 64)
    audio_hidden: int = 256
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    knee_quantile: float = 0.7
    eval_draws: int = 4
    seed: int = 0
    scramble_labels: bool = False  # null-model control: destroys the signal

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch size >= 2")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout fraction must be in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0 <= self.label_smoothing < 0.5:
            raise ConfigError("label smoothing must be in [0, 0.5)")
        if not 0 < self.knee_quantile < 1:
            raise ConfigError("knee quantile must be in (0, 1)")
        if self.min_offset < 1:
            raise ConfigError("min_offset must be positive")
        if self.anchor_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"anchor_schedule must be 'constant' or 'cosine', got {self.anchor_schedule!r}"
            )


def mouth_boxes_for_motion(
    identity, motion, size: tuple[int, int] = (64, 64), margin: int = 5
) -> list[tuple[int, int, int, int]]:
    """Per-frame crop boxes from pose-only geometry (expression zeroed).

    Deriving the box from pose alone keeps its size independent of the
    mouth state, so resized crops preserve the full aperture signal
    instead of normalizing it away; the margin leaves room for the lips
    to move inside the box.
    """
    R, T, E = stack_motion(motion)
    k2d = project_points_raw(
        compose_batch(identity.canonical, R, T, torch.zeros_like(E)), size
    )
    return [mouth_crop_box(k2d[f], margin=margin, size=size) for f in range(len(motion))]


def clip_mouth_crops(clip: Clip, margin: int = 5) -> torch.Tensor:
    """Per-frame (3, 32, 32) mouth crops of a clip's ground-truth frames."""
    if clip.frames is None:
        raise DataError(f"clip {clip.name} has no frames to crop")
    h, w = clip.frames[0].size
    boxes = mouth_boxes_for_motion(clip.identity, clip.motion, (h, w), margin)
    with torch.no_grad():
        crops = [
            crop_and_resize(frame.pixels, box) for frame, box in zip(clip.frames, boxes)
        ]
    return torch.stack(crops)


class _WindowBank:
    """All clips' crops and audio flattened for vectorized window gathers."""

    def __init__(self, clips: list[Clip], window: int):
        half = (window - 1) // 2
        crops, audio, offsets, clip_len = [], [], [], []
        windows = []
        total = 0
        for ci, clip in enumerate(clips):
            if clip.n_frames < window:
                raise DataError(
                    f"clip {clip.name} has {clip.n_frames} frames, below window {window}"
                )
            crops.append(clip_mouth_crops(clip))
            audio.append(clip.audio.features)
            offsets.append(total)
            clip_len.append(clip.n_frames)
            for t in range(half, clip.n_frames - half):
                windows.append((ci, t))
            total += clip.n_frames
        self.crops = torch.cat(crops)
        self.audio = torch.cat(audio)
        self.offsets = torch.tensor(offsets, dtype=torch.long)
        self.clip_len = torch.tensor(clip_len, dtype=torch.long)
        self.windows = torch.tensor(windows, dtype=torch.long)  # (N, 2)
        self.half = half
        self.rel = torch.arange(-half, half + 1)

    def video(self, clip_i: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
        rows = self.offsets[clip_i, None] + center[:, None] + self.rel
        return self.crops[rows]

    def sound(self, clip_i: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
        rows = self.offsets[clip_i, None] + center[:, None] + self.rel
        return self.audio[rows]

    def negatives(
        self, clip_i: torch.Tensor, center: torch.Tensor,
        gen: torch.Generator, min_offset: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Misaligned audio sources: same-clip shifts or other clips, 50/50."""
        n = len(clip_i)
        length = self.clip_len[clip_i]
        lo, hi = self.half, length - 1 - self.half
        # interior centers at least min_offset away from the aligned one
        left = (center - min_offset - lo + 1).clamp(min=0)
        right = (hi - (center + min_offset) + 1).clamp(min=0)
        u = (torch.rand(n, generator=gen, dtype=DTYPE) * (left + right)).long()
        shifted = torch.where(u < left, lo + u, center + min_offset + (u - left))
        n_clips = len(self.clip_len)
        if n_clips > 1:
            other = torch.randint(n_clips - 1, (n,), generator=gen)
            other = other + (other >= clip_i).long()
            other_hi = self.clip_len[other] - 1 - self.half
            span = (other_hi - self.half + 1).to(DTYPE)
            other_center = self.half + (
                torch.rand(n, generator=gen, dtype=DTYPE) * span
            ).long()
            use_cross = (torch.rand(n, generator=gen, dtype=DTYPE) < 0.5) & (left + right > 0) | (
                (left + right) == 0
            )
        else:
            if bool(((left + right) == 0).any()):
                raise DataError("single clip too short to draw shifted negatives")
            return clip_i, shifted
        neg_clip = torch.where(use_cross, other, clip_i)
        neg_center = torch.where(use_cross, other_center, shifted)
        return neg_clip, neg_center


def _smoothed_bce(cos: torch.Tensor, label: float, smoothing: float) -> torch.Tensor:
    p = ((cos + 1.0) * 0.5).clamp(1e-7, 1 - 1e-7)
    y = label * (1.0 - 2.0 * smoothing) + smoothing
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def _holdout_metrics(
    expert: SyncExpert, bank: _WindowBank, hold: torch.Tensor, cfg: SyncTrainConfig,
    chunk: int = 512,
) -> dict:
    """Balanced pair accuracy at the cosine-zero threshold, plus margins."""
    ci, ce = bank.windows[hold, 0], bank.windows[hold, 1]
    with torch.no_grad():
        v = torch.cat([
            expert.encode_video(bank.video(ci[s:s + chunk], ce[s:s + chunk]))
            for s in range(0, len(hold), chunk)
        ])
        a = torch.cat([
            expert.encode_audio(bank.sound(ci[s:s + chunk], ce[s:s + chunk]))
            for s in range(0, len(hold), chunk)
        ])
        cos_pos = (v * a).sum(dim=-1)
        accs, cos_negs = [], []
        for draw in range(cfg.eval_draws):
            gen = torch.Generator().manual_seed(cfg.seed * 1000 + draw)
            nci, nce = bank.negatives(ci, ce, gen, cfg.min_offset)
            an = torch.cat([
                expert.encode_audio(bank.sound(nci[s:s + chunk], nce[s:s + chunk]))
                for s in range(0, len(hold), chunk)
            ])
            cos_neg = (v * an).sum(dim=-1)
            accs.append(
                0.5 * float((cos_pos > 0).to(DTYPE).mean())
                + 0.5 * float((cos_neg <= 0).to(DTYPE).mean())
            )
            cos_negs.append(float(cos_neg.mean()))
        # 10-frame shifted audio must score below the aligned audio
        length = bank.clip_len[ci]
        sh = torch.where(ce + 10 <= length - 1 - bank.half, ce + 10, ce - 10)
        ash = torch.cat([
            expert.encode_audio(bank.sound(ci[s:s + chunk], sh[s:s + chunk]))
            for s in range(0, len(hold), chunk)
        ])
        shifted_below = float(((v * ash).sum(dim=-1) < cos_pos).to(DTYPE).mean())
    return {
        "accuracy": sum(accs) / len(accs),
        "cos_aligned": float(cos_pos.mean()),
        "cos_misaligned": sum(cos_negs) / len(cos_negs),
        "shifted_below_fraction": shifted_below,
    }


def train_sync(
    clips: list[Clip], cfg: SyncTrainConfig | None = None
) -> tuple[SyncExpert, dict]:
    """Train the expert on corpus clips; fails loudly if it cannot separate.

    Returns (expert, report). The report carries the held-out accuracy
    curve; a final accuracy below cfg.target_accuracy raises NumericError
    with the full history attached.
    """
    cfg = cfg or SyncTrainConfig()
    if not clips:
        raise DataError("sync expert training needs at least one clip")
    bank = _WindowBank(clips, SYNC_WINDOW)
    n = len(bank.windows)
    if n < 10:
        raise DataError(f"only {n} usable windows; corpus too small")

    gen = torch.Generator().manual_seed(cfg.seed)
    order = torch.randperm(n, generator=gen)
    n_hold = max(2, int(n * cfg.holdout_fraction))
    hold, train_idx = order[:n_hold], order[n_hold:]

    expert = SyncExpert(
        d_a=clips[0].audio.d_a,
        seed=cfg.seed,
        conv_channels=cfg.conv_channels,
        audio_hidden=cfg.audio_hidden,
        anchor_sigma=cfg.anchor_sigma,
    )
    with torch.no_grad():
        e2 = torch.exp(bank.audio).sum(dim=-1)
        expert.energy_knee.copy_(torch.sqrt(e2.quantile(cfg.knee_quantile)))

    opt = torch.optim.Adam(expert.parameters(), lr=cfg.learning_rate)
    steps_per_epoch = (len(train_idx) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    warmup = max(1, cfg.warmup_epochs * steps_per_epoch)

    history: list[float] = []
    loss_curve: list[float] = []
    best = (-1.0, None)
    step = 0
    for epoch in range(cfg.epochs):
        perm = train_idx[torch.randperm(len(train_idx), generator=gen)]
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            if step < warmup:
                lr_scale = (step + 1) / warmup
            else:
                t = (step - warmup) / max(1, total_steps - warmup)
                lr_scale = 0.5 * (1.0 + math.cos(math.pi * t))
            for group in opt.param_groups:
                group["lr"] = cfg.learning_rate * lr_scale

            ci, ce = bank.windows[idx, 0], bank.windows[idx, 1]
            nci, nce = bank.negatives(ci, ce, gen, cfg.min_offset)
            v = expert.encode_video(bank.video(ci, ce))
            aud_pos = bank.sound(ci, ce)
            aud_neg = bank.sound(nci, nce)
            a_pos = expert.encode_audio(aud_pos)
            a_neg = expert.encode_audio(aud_neg)
            cos_pos = (v * a_pos).sum(dim=-1)
            cos_neg = (v * a_neg).sum(dim=-1)

            if cfg.scramble_labels:
                cos_all = torch.cat([cos_pos, cos_neg])
                labels = torch.cat([
                    torch.ones(len(idx), dtype=DTYPE), torch.zeros(len(idx), dtype=DTYPE)
                ])
                labels = labels[torch.randperm(len(labels), generator=gen)]
                y = labels * (1.0 - 2.0 * cfg.label_smoothing) + cfg.label_smoothing
                p = ((cos_all + 1.0) * 0.5).clamp(1e-7, 1 - 1e-7)
                loss = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()
            else:
                loss = (
                    _smoothed_bce(cos_pos, 1.0, cfg.label_smoothing)
                    + _smoothed_bce(cos_neg, 0.0, cfg.label_smoothing)
                )
            if cfg.anchor_schedule == "cosine":
                # anchors bootstrap the geometry, then fade so the pair
                # loss can sharpen the boundary past the kernel's bandwidth
                anchor_scale = 0.5 * (1.0 + math.cos(math.pi * step / max(1, total_steps)))
            else:
                anchor_scale = 1.0
            if cfg.anchor_weight > 0 and anchor_scale > 0:
                t_pos = expert.anchor_codes(aud_pos)
                t_neg = expert.anchor_codes(aud_neg)
                loss = loss + cfg.anchor_weight * anchor_scale * (
                    (1.0 - (a_pos * t_pos).sum(dim=-1)).mean()
                    + (1.0 - (a_neg * t_neg).sum(dim=-1)).mean()
                )
            # the video anchor encodes the alignment itself, so the
            # scrambled null must not see it
            if cfg.video_anchor_weight > 0 and anchor_scale > 0 and not cfg.scramble_labels:
                t_vid = expert.anchor_codes(aud_pos, side=+1.0)
                loss = loss + cfg.video_anchor_weight * anchor_scale * (
                    (1.0 - (v * t_vid).sum(dim=-1)).mean()
                )
            if not torch.isfinite(loss):
                raise NumericError(
                    f"sync expert loss became non-finite at epoch {epoch} step {step}"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(expert.parameters(), cfg.grad_clip)
            opt.step()
            loss_curve.append(float(loss.detach()))
            step += 1

        metrics = _holdout_metrics(expert, bank, hold, cfg)
        history.append(metrics["accuracy"])
        if metrics["accuracy"] > best[0]:
            best = (
                metrics["accuracy"],
                {k: p.detach().clone() for k, p in expert.state_dict().items()},
            )
        if metrics["accuracy"] >= cfg.stop_accuracy:
            break

    if best[1] is not None:
        expert.load_state_dict(best[1])
    final = _holdout_metrics(expert, bank, hold, cfg)
    report = {
        "holdout_accuracy": final["accuracy"],
        "best_accuracy": best[0],
        "accuracy_history": history,
        "epochs_run": len(history),
        "n_windows": n,
        "n_holdout": int(n_hold),
        "final_train_loss": loss_curve[-1] if loss_curve else None,
        "cos_aligned": final["cos_aligned"],
        "cos_misaligned": final["cos_misaligned"],
        "cos_gap": final["cos_aligned"] - final["cos_misaligned"],
        "shifted_below_fraction": final["shifted_below_fraction"],
        "energy_knee": float(expert.energy_knee),
    }
    if not cfg.scramble_labels and final["accuracy"] < cfg.target_accuracy:
        raise NumericError(
            f"sync expert stalled at held-out accuracy {final['accuracy']:.3f} "
            f"(target {cfg.target_accuracy}); history={history}"
        )
    for p in expert.parameters():
        p.requires_grad_(False)
    expert.eval()
    return expert, report


def save_expert(path, expert: SyncExpert, extra: dict | None = None):
    """Archive the expert's construction arguments and weights."""
    from .checkpoint import save_archive

    return save_archive(path, "sync_expert", expert.init_args(), expert.state_dict(), extra)


def load_expert(path) -> SyncExpert:
    """Restore a frozen expert archived by save_expert."""
    from .checkpoint import load_archive

    payload = load_archive(path, "sync_expert")
    args = dict(payload["config"])
    args["conv_channels"] = tuple(args["conv_channels"])
    expert = SyncExpert(**args)
    expert.load_state_dict(payload["state_dict"])
    for p in expert.parameters():
        p.requires_grad_(False)
    expert.eval()
    return expert
