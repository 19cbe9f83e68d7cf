"""Audio-to-expression adapter with a zero-initialized output head.

The network maps (audio context window, current expression) to a bias
``delta_e`` that reshapes the mouth, applied as ``e' = e + alpha * delta_e``.
The output head starts at exactly zero, so an untrained adapter is a
strict no-op on the rest of the pipeline — capability grows from zero as
the head trains, and ``alpha`` scales it back down at will.

A second, silent-audio pass shares the same weights: first drive the
expression with silence (which training teaches to close the mouth),
then drive the result with the real audio. Inference can skip the
prepass; training relies on it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch

from .audio import LOG_FLOOR, AudioFeatureSequence, AudioWindow, silent_track, window_indices
from .checkpoint import load_archive, save_archive
from .errors import ConfigError, DimensionError
from .motion import MotionParams, edit_expression

DTYPE = torch.float64

# Log-mel features live in [ln(1e-10), ~0]; rescale so silence maps to an
# exact zero vector and speech to O(1) values, keeping the tanh branches
# out of saturation.
_LOG_MEL_FLOOR = math.log(LOG_FLOOR)


@dataclass(frozen=True)
class ModelConfig:
    """Adapter dimensions; defaults match the stock pipeline."""

    n_kp: int = 20
    d_a: int = 80
    window: int = 5
    hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_kp < 1 or self.d_a < 1 or self.hidden < 1:
            raise ConfigError("model dimensions must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"audio window must be odd and positive, got {self.window}")


@dataclass(frozen=True)
class InferenceConfig:
    """Inference-time editing knobs.

    alpha around 0.5 gives natural mouth amplitude; 0 disables editing
    entirely; values above 1 exaggerate and must be opted into.
    """

    alpha: float = 0.5
    use_silent_prepass: bool = True
    allow_exaggeration: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.alpha > 1 and not self.allow_exaggeration:
            raise ConfigError(
                f"alpha={self.alpha} exaggerates motion; set allow_exaggeration"
            )


def _init_uniform_fan_in(linear: torch.nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / linear.in_features**0.5
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=gen)
        linear.bias.uniform_(-bound, bound, generator=gen)


class Audio2Exp(torch.nn.Module):
    """Two-branch MLP with fusion trunk and zero head.

    Audio branch: flattened (window x d_a) -> 2 tanh layers.
    Expression branch: flattened (n_kp x 3) -> 1 tanh layer.
    Trunk: concat -> 2 tanh layers. Head: linear to n_kp*3, starts zero.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        kw = {"dtype": DTYPE}
        self.audio_fc1 = torch.nn.Linear(cfg.window * cfg.d_a, h, **kw)
        self.audio_fc2 = torch.nn.Linear(h, h, **kw)
        self.expr_fc = torch.nn.Linear(cfg.n_kp * 3, h, **kw)
        self.trunk_fc1 = torch.nn.Linear(2 * h, h, **kw)
        self.trunk_fc2 = torch.nn.Linear(h, h, **kw)
        self.head = torch.nn.Linear(h, cfg.n_kp * 3, **kw)

        gen = torch.Generator().manual_seed(cfg.seed)
        for layer in (self.audio_fc1, self.audio_fc2, self.expr_fc,
                      self.trunk_fc1, self.trunk_fc2):
            _init_uniform_fan_in(layer, gen)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def _coerce(self, a, e) -> tuple[torch.Tensor, torch.Tensor, bool]:
        if isinstance(a, AudioWindow):
            a = a.features
        a = torch.as_tensor(a, dtype=DTYPE)
        e = torch.as_tensor(e, dtype=DTYPE)
        squeeze = a.ndim == 2
        if a.ndim == 2:
            a = a[None]
        if e.ndim == 2:
            e = e[None]
        if a.ndim != 3 or a.shape[1:] != (self.cfg.window, self.cfg.d_a):
            raise DimensionError(
                f"audio window must be ({self.cfg.window}, {self.cfg.d_a}), "
                f"got {tuple(a.shape[1:])}"
            )
        if e.shape[1:] != (self.cfg.n_kp, 3):
            raise DimensionError(
                f"expression must be ({self.cfg.n_kp}, 3), got {tuple(e.shape[1:])}"
            )
        if a.shape[0] != e.shape[0]:
            raise DimensionError("audio and expression batch sizes disagree")
        return a, e, squeeze

    def forward(self, a, e) -> torch.Tensor:
        a, e, squeeze = self._coerce(a, e)
        b = a.shape[0]
        a = (a - _LOG_MEL_FLOOR) / (-_LOG_MEL_FLOOR)
        ha = torch.tanh(self.audio_fc1(a.reshape(b, -1)))
        ha = torch.tanh(self.audio_fc2(ha))
        he = torch.tanh(self.expr_fc(e.reshape(b, -1)))
        x = torch.tanh(self.trunk_fc1(torch.cat([ha, he], dim=1)))
        x = torch.tanh(self.trunk_fc2(x))
        delta = self.head(x).reshape(b, self.cfg.n_kp, 3)
        return delta[0] if squeeze else delta

    def predict_delta(self, a, e) -> torch.Tensor:
        """Expression bias for one audio window (or a batch)."""
        return self(a, e)

    def apply_edit(self, a, e, alpha: float, allow_exaggeration: bool = False) -> torch.Tensor:
        """e + alpha * predict_delta(a, e)."""
        delta = self(a, e)
        return edit_expression(
            torch.as_tensor(e, dtype=DTYPE), delta, alpha,
            allow_exaggeration=allow_exaggeration,
        )

    def dual_pass(
        self, silent, driving, e, alpha: float, allow_exaggeration: bool = False
    ) -> torch.Tensor:
        """Silent prepass then driven pass, same weights and alpha.

        Returns the final expression; call apply_edit with the silent
        window directly when the intermediate neutral state is needed.
        """
        e_neutral = self.apply_edit(silent, e, alpha, allow_exaggeration)
        return self.apply_edit(driving, e_neutral, alpha, allow_exaggeration)


def init_model(cfg: ModelConfig | None = None) -> Audio2Exp:
    """Fresh adapter: seeded branches, exactly-zero head."""
    return Audio2Exp(cfg or ModelConfig())


def infer_sequence(
    model: Audio2Exp,
    identity,
    motion: Sequence[MotionParams],
    audio: AudioFeatureSequence,
    cfg: InferenceConfig | None = None,
    base_expression: torch.Tensor | None = None,
) -> tuple[list[MotionParams], torch.Tensor]:
    """Drive one identity through a motion/audio pair; return edited motion.

    The head pose of every output frame comes from ``motion``; the
    expression starts from ``base_expression`` (default: all zeros, a
    closed neutral mouth) and is edited per frame by the adapter using
    that frame's audio context window. Returns the edited motion list
    and the per-frame mouth aperture of the composed keypoints.
    """
    from .corpus import LOWER_LIP, UPPER_LIP, compose_batch, stack_motion

    cfg = cfg or InferenceConfig()
    n = len(motion)
    if n == 0:
        raise DimensionError("motion sequence is empty")
    if audio.n_frames != n:
        raise DimensionError(
            f"audio has {audio.n_frames} frames but motion has {n}"
        )
    if base_expression is None:
        base = torch.zeros(n, model.cfg.n_kp, 3, dtype=DTYPE)
    else:
        base = torch.as_tensor(base_expression, dtype=DTYPE)
        if base.shape == (model.cfg.n_kp, 3):
            base = base[None].expand(n, -1, -1)
        if base.shape != (n, model.cfg.n_kp, 3):
            raise DimensionError(
                f"base expression must be ({model.cfg.n_kp}, 3) or "
                f"({n}, {model.cfg.n_kp}, 3), got {tuple(base.shape)}"
            )

    w = model.cfg.window
    idx = torch.stack([window_indices(n, t, w) for t in range(n)])
    windows = audio.features[idx]  # (n, w, d_a)
    with torch.no_grad():
        if cfg.use_silent_prepass:
            silent = silent_track(w).features[None].expand(n, -1, -1)
            edited = model.dual_pass(
                silent, windows, base, cfg.alpha, cfg.allow_exaggeration
            )
        else:
            edited = model.apply_edit(
                windows, base, cfg.alpha, cfg.allow_exaggeration
            )

    out = [
        MotionParams(pose=motion[t].pose, expression=edited[t]) for t in range(n)
    ]
    R, T, E = stack_motion(out)
    k = compose_batch(identity.canonical, R, T, E)
    aperture = torch.linalg.vector_norm(k[:, UPPER_LIP] - k[:, LOWER_LIP], dim=-1)
    return out, aperture


def save_model(path: str | Path, model: Audio2Exp, extra: dict | None = None) -> Path:
    """Archive the adapter's config and weights."""
    return save_archive(path, "audio2exp", asdict(model.cfg), model.state_dict(), extra)


def load_model(path: str | Path) -> Audio2Exp:
    """Restore an adapter archived by save_model."""
    payload = load_archive(path, "audio2exp")
    model = Audio2Exp(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model
