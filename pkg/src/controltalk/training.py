"""Adapter training: alpha warmup, dual silent-audio pass, loss assembly.

Each step samples 5-frame windows from the corpus, edits every frame's
expression from its own audio context (silent pass first, then the
driving pass), renders the edited keypoints, and optimizes three terms:
a mouth-masked perceptual loss that protects everything outside the
mouth, a sync loss that pulls generated mouth crops toward the audio in
the frozen expert's embedding space, and a small penalty on the mouth
aperture left open by the silent pass.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .audio import window_indices
from .checkpoint import load_archive, save_archive, state_dict_hash
from .corpus import (
    LOWER_LIP,
    MOUTH_INDICES,
    UPPER_LIP,
    Clip,
    stack_motion,
)
from .errors import ConfigError, DataError, NumericError
from .losses import FeatureExtractor, LossConfig, perceptual_loss, sync_loss, total_loss
from .model import Audio2Exp, ModelConfig, init_model, save_model
from .motion import project_points_raw
from .renderer import mouth_mask, splat_images
from .sync import SYNC_WINDOW, SyncExpert, crop_and_resize, mouth_boxes_for_motion

DTYPE = torch.float64


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the stock learning rate follows the
    full-scale regime, desk_preset() gives the fast CPU variant."""

    learning_rate: float = 1e-5
    batch_size: int = 8
    total_steps: int = 2000
    warmup_fraction: float = 0.1
    momentum: float = 0.9
    silent_penalty: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if not 0 < self.warmup_fraction <= 1:
            raise ConfigError(
                f"warmup fraction must be in (0, 1], got {self.warmup_fraction}"
            )
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch size and total steps must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.silent_penalty < 0:
            raise ConfigError("silent penalty weight must be non-negative")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("cadences must be positive")


def desk_preset(**overrides) -> TrainConfig:
    """CPU-friendly recipe: lr 1e-3, 2000 steps, batch 8."""
    return replace(TrainConfig(learning_rate=1e-3), **overrides)


def alpha_schedule(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear ramp 0 -> 1 over the first warmup_fraction of training."""
    ramp = warmup_fraction * total_steps
    return float(min(1.0, step / ramp))


class _ClipBank:
    """Per-clip tensors the sampler gathers from at every step."""

    def __init__(self, clip: Clip, image_size: tuple[int, int], mouth_margin: int):
        if clip.frames is None:
            raise DataError(f"clip {clip.name} has no frames; training needs pixels")
        if clip.n_frames < SYNC_WINDOW:
            raise DataError(
                f"clip {clip.name} has {clip.n_frames} frames, "
                f"below the sync window {SYNC_WINDOW}"
            )
        self.clip = clip
        self.canonical = clip.identity.canonical
        self.appearance = clip.identity.appearance
        self.R, self.T, self.E = stack_motion(clip.motion)
        self.audio = clip.audio.features
        self.boxes = torch.tensor(
            mouth_boxes_for_motion(clip.identity, clip.motion, image_size),
            dtype=torch.long,
        )
        # Ground-truth mouth masks derive from the unedited keypoints.
        k_gt = torch.einsum("fij,fkj->fki", self.R, self.canonical.expand(
            clip.n_frames, -1, -1)) + self.T[:, None, :] + self.E
        k2d = project_points_raw(k_gt, image_size)
        self.masks = torch.stack(
            [mouth_mask(k2d[f], MOUTH_INDICES, mouth_margin, image_size)
             for f in range(clip.n_frames)]
        )
        self.pixels = torch.stack([f.pixels for f in clip.frames])


@dataclass
class _Batch:
    """Flattened 5-frame windows: B samples -> 5B frames."""

    canonical: torch.Tensor      # (5B, n_kp, 3)
    R: torch.Tensor              # (5B, 3, 3)
    T: torch.Tensor              # (5B, 3)
    E_base: torch.Tensor         # (5B, n_kp, 3)
    gt_pixels: torch.Tensor      # (5B, H, W, 3)
    masks: torch.Tensor          # (5B, H, W)
    boxes: torch.Tensor          # (5B, 4)
    frame_windows: torch.Tensor  # (5B, w, d_a)  per-frame driving audio
    center_windows: torch.Tensor # (B, w, d_a)   audio for the sync loss
    groups: list  # (appearance, row indices) per identity

    @property
    def n_samples(self) -> int:
        return self.center_windows.shape[0]


def _gather_batch(banks: list[_ClipBank], flat: torch.Tensor, idx: torch.Tensor,
                  window: int) -> _Batch:
    half = (window - 1) // 2
    rows = {k: [] for k in ("canonical", "R", "T", "E", "px", "mask", "box", "fwin")}
    center_windows, owners = [], []
    for ci, t in flat[idx].tolist():
        bank = banks[ci]
        n = bank.R.shape[0]
        fidx = torch.arange(t - half, t + half + 1)
        rows["canonical"].append(bank.canonical.expand(window, -1, -1))
        rows["R"].append(bank.R[fidx])
        rows["T"].append(bank.T[fidx])
        rows["E"].append(bank.E[fidx])
        rows["px"].append(bank.pixels[fidx])
        rows["mask"].append(bank.masks[fidx])
        rows["box"].append(bank.boxes[fidx])
        rows["fwin"].append(
            bank.audio[torch.stack([window_indices(n, int(f), window) for f in fidx])]
        )
        center_windows.append(bank.audio[window_indices(n, t, window)])
        owners.extend([ci] * window)
    groups = []
    owners_t = torch.tensor(owners)
    for ci in sorted(set(owners)):
        groups.append((banks[ci].appearance, torch.nonzero(owners_t == ci).reshape(-1)))
    return _Batch(
        canonical=torch.cat(rows["canonical"]),
        R=torch.cat(rows["R"]),
        T=torch.cat(rows["T"]),
        E_base=torch.cat(rows["E"]),
        gt_pixels=torch.cat(rows["px"]),
        masks=torch.cat(rows["mask"]),
        boxes=torch.cat(rows["box"]),
        frame_windows=torch.cat(rows["fwin"]),
        center_windows=torch.stack(center_windows),
        groups=groups,
    )


def train_step(
    batch: _Batch,
    model: Audio2Exp,
    expert: SyncExpert,
    fx: FeatureExtractor,
    cfg: TrainConfig,
    alpha: float,
    optimizer: torch.optim.Optimizer | None,
    step: int,
) -> dict:
    """One optimization step over a batch of windows; returns the loss record."""
    from .audio import silent_track

    nf = batch.R.shape[0]  # 5B frames
    w = model.cfg.window
    silent = silent_track(w).features[None].expand(nf, -1, -1)

    e_sil = model.apply_edit(silent, batch.E_base, alpha)
    e_edit = model.apply_edit(batch.frame_windows, e_sil, alpha)

    gap = e_sil[:, UPPER_LIP] - e_sil[:, LOWER_LIP]
    penalty = torch.sqrt((gap**2).sum(dim=-1) + 1e-12).mean()

    k = torch.einsum("fij,fkj->fki", batch.R, batch.canonical) \
        + batch.T[:, None, :] + e_edit
    order = torch.cat([rows for _, rows in batch.groups])
    rendered = torch.cat(
        [splat_images(k[rows], appearance, cfg.image_size)
         for appearance, rows in batch.groups]
    )
    y = rendered[torch.argsort(order)].clamp(0.0, 1.0)

    l_p = perceptual_loss(y, batch.gt_pixels, batch.masks, fx)

    crops = torch.stack(
        [crop_and_resize(y[f], tuple(batch.boxes[f].tolist())) for f in range(nf)]
    ).reshape(batch.n_samples, w, 3, 32, 32)
    v = expert.encode_video(crops)
    a = expert.encode_audio(batch.center_windows)
    l_sync = sync_loss(v, a)

    total = total_loss(l_p, l_sync, cfg.loss) + cfg.silent_penalty * penalty
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss at step {step}: "
            f"l_p={float(l_p.detach())}, l_sync={float(l_sync.detach())}, "
            f"penalty={float(penalty.detach())}"
        )
    if optimizer is not None:
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
    # the closed-mouth penalty is folded into "total"; the record's key
    # set is part of the run-log contract and stays fixed
    return {
        "step": step,
        "alpha": alpha,
        "l_p": float(l_p.detach()),
        "l_sync": float(l_sync.detach()),
        "total": float(total.detach()),
    }


def _window_index(banks: list[_ClipBank], window: int) -> torch.Tensor:
    half = (window - 1) // 2
    pairs = []
    for ci, bank in enumerate(banks):
        n = bank.R.shape[0]
        for t in range(half, n - half):
            pairs.append((ci, t))
    return torch.tensor(pairs, dtype=torch.long)


def train(
    clips: Sequence[Clip],
    expert: SyncExpert,
    cfg: TrainConfig | None = None,
    out_dir: str | Path = "runs/train",
    resume: bool = False,
    session_steps: int | None = None,
) -> Path:
    """Full training run; returns the final model checkpoint path.

    Writes an append-only JSONL run log (one record per step), a
    resumable train_state.pt every checkpoint cadence, and model.pt at
    the end. ``resume=True`` continues from out_dir/train_state.pt and
    reproduces the uninterrupted run bit-exactly. ``session_steps``
    bounds how many steps this invocation may run (for preemptible
    jobs); an interrupted run returns the state path instead of a model.
    """
    cfg = cfg or TrainConfig()
    if not clips:
        raise DataError("no training clips")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "train_state.pt"
    log_path = out / "run_log.jsonl"

    for p in expert.parameters():
        p.requires_grad_(False)
    expert.eval()
    expert_hash = state_dict_hash(expert.state_dict())

    banks = [_ClipBank(c, cfg.image_size, cfg.loss.mouth_margin_px) for c in clips]
    flat = _window_index(banks, SYNC_WINDOW)
    fx = FeatureExtractor(seed=cfg.seed)
    sampler = torch.Generator().manual_seed(cfg.seed + 1)

    if resume:
        payload = load_archive(state_path, "train_state")
        if payload["extra"]["expert_hash"] != expert_hash:
            raise DataError(
                "resume uses a different sync expert than the original run"
            )
        model = Audio2Exp(ModelConfig(**payload["config"]))
        model.load_state_dict(payload["state_dict"])
        optimizer = torch.optim.SGD(
            model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum
        )
        optimizer.load_state_dict(payload["extra"]["optimizer"])
        sampler.set_state(payload["extra"]["sampler_state"])
        start = payload["extra"]["step"]
    else:
        model = init_model(ModelConfig(seed=cfg.seed))
        optimizer = torch.optim.SGD(
            model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum
        )
        start = 0
        log_path.write_text("")

    def save_state(step: int) -> None:
        save_archive(
            state_path, "train_state", asdict(model.cfg), model.state_dict(),
            extra={
                "optimizer": optimizer.state_dict(),
                "sampler_state": sampler.get_state(),
                "step": step,
                "expert_hash": expert_hash,
                "train_config": _config_dict(cfg),
            },
        )

    stop_at = cfg.total_steps
    if session_steps is not None:
        if session_steps < 1:
            raise ConfigError(f"session_steps must be positive, got {session_steps}")
        stop_at = min(stop_at, start + session_steps)

    t0 = time.time()
    recent: list[dict] = []
    with open(log_path, "a") as log:
        for step in range(start, stop_at):
            alpha = alpha_schedule(step, cfg.total_steps, cfg.warmup_fraction)
            idx = torch.randint(len(flat), (cfg.batch_size,), generator=sampler)
            batch = _gather_batch(banks, flat, idx, SYNC_WINDOW)
            try:
                record = train_step(batch, model, expert, fx, cfg, alpha,
                                    optimizer, step)
            except NumericError:
                save_state(step)
                (out / "abort_dump.json").write_text(json.dumps({
                    "step": step, "alpha": alpha,
                    "recent": recent[-10:],
                }, indent=2))
                raise
            log.write(json.dumps(record) + "\n")
            recent.append(record)
            if len(recent) > 50:
                recent.pop(0)
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                print(
                    f"step {step + 1}/{cfg.total_steps} "
                    f"alpha {alpha:.3f} l_p {record['l_p']:.5f} "
                    f"l_sync {record['l_sync']:.5f} total {record['total']:.5f}",
                    flush=True,
                )
            if (step + 1) % cfg.checkpoint_every == 0:
                save_state(step + 1)
        if stop_at < cfg.total_steps:
            save_state(stop_at)
            return state_path
        save_state(cfg.total_steps)
        summary = {
            "summary": {
                "steps": cfg.total_steps,
                "wall_time_s": time.time() - t0,
                "mean_l_p": sum(r["l_p"] for r in recent) / max(len(recent), 1),
                "mean_l_sync": sum(r["l_sync"] for r in recent) / max(len(recent), 1),
                "mean_total": sum(r["total"] for r in recent) / max(len(recent), 1),
                "final_alpha": alpha_schedule(
                    cfg.total_steps - 1, cfg.total_steps, cfg.warmup_fraction
                ),
                "checkpoint_hash": state_dict_hash(model.state_dict()),
                "expert_hash": expert_hash,
            }
        }
        log.write(json.dumps(summary) + "\n")

    if state_dict_hash(expert.state_dict()) != expert_hash:
        raise NumericError("sync expert weights changed during adapter training")
    return save_model(out / "model.pt", model,
                      extra={"expert_hash": expert_hash,
                             "train_config": _config_dict(cfg)})


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["image_size"] = list(cfg.image_size)
    return d
