"""Procedural talking-face corpus with a closed-form audio-to-mouth law.

Every clip is synthesized end to end: a pseudo-speech waveform (seeded
amplitude-modulated tones with hard silence gaps), a mouth aperture
defined *exactly* as g(u) = 0.25*u / (u + 0.1) of the per-frame block
RMS u, expressions that open the lip keypoints to precisely that
aperture, a smooth seeded head-pose curve, splat-rendered frames, and
log-mel features. Because the law is known, any model trained here can
be scored against ground truth instead of eyeballed.

The upper- and lower-lip keypoints share one canonical position (their
jitter is tied), so the aperture equals the norm of their expression
difference under any pose — rotation and retargeting cannot blur the
oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .audio import FPS, HOP, AudioFeatureSequence, Waveform, block_rms, save_wav, toy_encode
from .errors import ConfigError, DataError, ValidationError
from .motion import (
    MotionParams,
    Pose,
    compose_keypoints,
    load_motion_stream,
    rotation_from_euler,
    save_motion_stream,
)
from .renderer import (
    Frame,
    IdentityAppearance,
    load_clip_frames,
    mouth_aperture,
    save_clip_frames,
    splat_images,
)

N_KP = 20
EYE_LEFT, EYE_RIGHT = 0, 1
MOUTH_INDICES = (16, 17, 18, 19)  # left corner, right corner, upper lip, lower lip
UPPER_LIP, LOWER_LIP = 18, 19

G_SCALE = 0.25
G_KNEE = 0.1

TEMPLATE_BOUND = 0.8
JITTER = 0.05

CORPUS_VERSION = 1


def aperture_law(u):
    """The fixed saturating audio-energy -> mouth-aperture law."""
    return G_SCALE * u / (u + G_KNEE)


def _face_template() -> torch.Tensor:
    """Neutral 20-keypoint face layout (x right, y down, z toward viewer)."""
    jaw_angles = np.linspace(np.pi, 0.0, 8)
    jaw = np.stack(
        [0.5 * np.cos(jaw_angles), 0.12 + 0.42 * np.sin(jaw_angles), np.zeros(8)], axis=1
    )
    pts = np.array(
        [
            [-0.25, -0.22, 0.10],  # 0 left eye
            [0.25, -0.22, 0.10],  # 1 right eye
            [-0.28, -0.36, 0.08],  # 2 left brow
            [0.28, -0.36, 0.08],  # 3 right brow
            [0.00, -0.08, 0.16],  # 4 nose bridge
            [0.00, 0.06, 0.20],  # 5 nose tip
            [-0.42, 0.05, 0.05],  # 6 left cheek
            [0.42, 0.05, 0.05],  # 7 right cheek
        ]
    )
    mouth = np.array(
        [
            [-0.16, 0.30, 0.12],  # 16 left corner
            [0.16, 0.30, 0.12],  # 17 right corner
            [0.00, 0.30, 0.12],  # 18 upper lip
            [0.00, 0.30, 0.12],  # 19 lower lip (coincident with upper)
        ]
    )
    return torch.from_numpy(np.concatenate([pts, jaw, mouth]))


@dataclass(frozen=True)
class SyntheticIdentity:
    """One procedurally generated face: geometry plus splat appearance."""

    canonical: torch.Tensor  # (N_KP, 3)
    appearance: IdentityAppearance
    seed: int

    def __post_init__(self):
        c = torch.as_tensor(self.canonical, dtype=torch.float64)
        if c.shape != (N_KP, 3):
            raise ValidationError(f"identity needs {N_KP} keypoints, got {tuple(c.shape)}")
        if c.abs().max() > TEMPLATE_BOUND:
            raise ValidationError("identity template leaves the [-0.8, 0.8]^3 volume")
        if not torch.equal(c[UPPER_LIP], c[LOWER_LIP]):
            raise ValidationError("lip keypoints must share one canonical position")
        object.__setattr__(self, "canonical", c)


@dataclass(frozen=True)
class Clip:
    """A generated talking-face clip with its ground truth attached."""

    identity: SyntheticIdentity
    motion: list[MotionParams]
    audio: AudioFeatureSequence
    gt_aperture: torch.Tensor  # (n_frames,)
    name: str
    seed: int
    frames: list[Frame] | None = None
    waveform: Waveform | None = None

    def __post_init__(self):
        n = len(self.motion)
        if self.audio.n_frames != n or self.gt_aperture.shape[0] != n:
            raise ValidationError(
                f"clip {self.name}: motion ({n}), audio ({self.audio.n_frames}) and "
                f"aperture ({self.gt_aperture.shape[0]}) lengths disagree"
            )
        if self.frames is not None and len(self.frames) != n:
            raise ValidationError(f"clip {self.name}: frame count disagrees with motion")

    @property
    def n_frames(self) -> int:
        return len(self.motion)


def generate_identity(seed: int) -> SyntheticIdentity:
    """Deterministic identity: template jittered +-0.05, seeded appearance."""
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-JITTER, JITTER, (N_KP, 3))
    jitter[LOWER_LIP] = jitter[UPPER_LIP]  # lips stay coincident
    canonical = _face_template() + torch.from_numpy(jitter)

    colors = rng.uniform(0.25, 0.95, (N_KP, 3))
    colors[UPPER_LIP] = rng.uniform(0.6, 0.95, 3)  # lips stay bright for crop contrast
    colors[LOWER_LIP] = rng.uniform(0.6, 0.95, 3)
    radii = rng.uniform(1.6, 2.6, N_KP)
    radii[list(MOUTH_INDICES)] = rng.uniform(2.0, 2.8, 4)
    background = rng.uniform(0.0, 0.12, 3)
    app = IdentityAppearance(
        colors=torch.from_numpy(colors),
        radii=torch.from_numpy(radii),
        background=torch.from_numpy(background),
    )
    return SyntheticIdentity(canonical=canonical, appearance=app, seed=seed)


def _pseudo_speech(rng: np.random.Generator, n_frames: int) -> np.ndarray:
    """AM tone mixture with frame-aligned silence gaps, |samples| <= 0.85."""
    n_samples = n_frames * HOP
    t = np.arange(n_samples) / 16000.0
    n_tones = int(rng.integers(2, 4))
    wave = np.zeros(n_samples)
    for _ in range(n_tones):
        freq = rng.uniform(120.0, 700.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        env_freq = rng.uniform(0.5, 2.2)
        env_phase = rng.uniform(0.0, 2 * np.pi)
        envelope = 0.5 * (1.0 + np.sin(2 * np.pi * env_freq * t + env_phase))
        wave += envelope * np.sin(2 * np.pi * freq * t + phase)
    wave *= 0.85 / n_tones

    n_gaps = int(rng.integers(2, 5))
    for _ in range(n_gaps):
        gap_len = int(rng.integers(5, 13))  # whole frames, 0.2-0.5 s
        gap_start = int(rng.integers(0, max(1, n_frames - gap_len)))
        wave[gap_start * HOP : (gap_start + gap_len) * HOP] = 0.0
    return wave


def _pose_curve(rng: np.random.Generator, n_frames: int) -> list[Pose]:
    """Smooth seeded head motion: yaw/pitch within 15 degrees, slight sway."""
    i = np.arange(n_frames) / FPS

    def smooth(amp_hi):
        amp = rng.uniform(0.3 * amp_hi, amp_hi)
        freq = rng.uniform(0.08, 0.4)
        phase = rng.uniform(0.0, 2 * np.pi)
        return amp * np.sin(2 * np.pi * freq * i + phase)

    limit = np.deg2rad(15.0)
    yaw, pitch, roll = smooth(limit), smooth(limit), smooth(np.deg2rad(3.0))
    tx, ty = smooth(0.05), smooth(0.05)
    poses = []
    for f in range(n_frames):
        R = rotation_from_euler(yaw[f], pitch[f], roll[f])
        T = torch.tensor([tx[f], ty[f], 0.0], dtype=torch.float64)
        poses.append(Pose(R=R, T=T))
    return poses


def expression_for_aperture(aperture: torch.Tensor, n_kp: int = N_KP) -> torch.Tensor:
    """Expressions opening the lips to exactly the given apertures.

    aperture: (n_frames,) -> (n_frames, n_kp, 3); the upper lip rises by
    half the aperture, the lower lip drops by half.
    """
    n = aperture.shape[0]
    e = torch.zeros(n, n_kp, 3, dtype=torch.float64)
    e[:, UPPER_LIP, 1] = -aperture / 2.0
    e[:, LOWER_LIP, 1] = aperture / 2.0
    return e


def render_motion(
    identity: SyntheticIdentity,
    motion: Sequence[MotionParams],
    size: tuple[int, int] = (64, 64),
    chunk: int = 16,
) -> list[Frame]:
    """Render a motion sequence to frames (chunked to bound memory)."""
    frames: list[Frame] = []
    for start in range(0, len(motion), chunk):
        batch = motion[start : start + chunk]
        ks = torch.stack([compose_keypoints(identity.canonical, m) for m in batch])
        imgs = splat_images(ks, identity.appearance, size).clamp(0.0, 1.0)
        frames.extend(Frame(pixels=img) for img in imgs)
    return frames


def generate_clip(
    identity: SyntheticIdentity,
    seed: int,
    n_frames: int = 100,
    image_size: tuple[int, int] = (64, 64),
    render_frames: bool = True,
    name: str | None = None,
) -> Clip:
    """One deterministic clip for (identity.seed, seed)."""
    if n_frames < 25:
        raise ConfigError(f"clips must be at least 25 frames (1 s), got {n_frames}")
    rng = np.random.default_rng([identity.seed & 0x7FFFFFFF, seed & 0x7FFFFFFF])
    wave = _pseudo_speech(rng, n_frames)
    energy = block_rms(wave, n_frames)
    gt_aperture = torch.from_numpy(aperture_law(energy))
    expressions = expression_for_aperture(gt_aperture)
    poses = _pose_curve(rng, n_frames)
    motion = [
        MotionParams(pose=p, expression=e, frame_index=f)
        for f, (p, e) in enumerate(zip(poses, expressions))
    ]
    waveform = Waveform(samples=wave)
    audio = toy_encode(waveform)
    frames = render_motion(identity, motion, image_size) if render_frames else None
    return Clip(
        identity=identity,
        motion=motion,
        audio=audio,
        gt_aperture=gt_aperture,
        name=name or f"id{identity.seed:04d}_clip{seed:04d}",
        seed=seed,
        frames=frames,
        waveform=waveform,
    )


def aperture_oracle(audio) -> torch.Tensor:
    """Ground-truth aperture curve for corpus audio.

    Accepts a Waveform (energies recomputed from samples) or an
    AudioFeatureSequence carrying stored frame energies. Audio from
    outside the corpus pipeline has no stored energies and is rejected.
    """
    if isinstance(audio, Waveform):
        return torch.from_numpy(aperture_law(block_rms(audio.samples)))
    if isinstance(audio, AudioFeatureSequence):
        if audio.frame_energy is None:
            raise DataError(
                "aperture oracle needs frame energies; this feature sequence "
                "was not produced by the corpus audio pipeline"
            )
        return aperture_law(audio.frame_energy)
    raise DataError(f"aperture oracle cannot read {type(audio).__name__}")


@dataclass(frozen=True)
class CorpusConfig:
    """Corpus shape; the stock settings build in minutes on CPU."""

    n_identities: int = 8
    clips_per_identity: int = 10
    frames_per_clip: int = 100
    test_identities: int = 2
    test_clips_per_identity: int = 4
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.n_identities, self.clips_per_identity, self.test_identities,
               self.test_clips_per_identity) < 1:
            raise ConfigError("corpus counts must be positive")
        if self.frames_per_clip < 25:
            raise ConfigError("frames_per_clip must be at least 25")


def _clip_dir_entries(cfg: CorpusConfig) -> dict[str, list[dict]]:
    """Deterministic (split, identity seed, clip seed) table for a config."""
    entries: dict[str, list[dict]] = {"train": [], "test": []}
    for split, n_ids, n_clips, id_base in (
        ("train", cfg.n_identities, cfg.clips_per_identity, cfg.seed),
        ("test", cfg.test_identities, cfg.test_clips_per_identity, cfg.seed + 1000),
    ):
        for i in range(n_ids):
            identity_seed = id_base + i
            for c in range(n_clips):
                clip_seed = cfg.seed + 100_000 + c
                name = f"id{identity_seed:04d}_clip{clip_seed:06d}"
                entries[split].append(
                    {
                        "path": f"{split}/{name}",
                        "identity_seed": identity_seed,
                        "clip_seed": clip_seed,
                        "n_frames": cfg.frames_per_clip,
                    }
                )
    return entries


def save_clip(clip: Clip, directory: str | Path) -> None:
    """Archive one clip: PNG frames, motion stream, feature arrays, metadata."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if clip.frames is None:
        raise DataError(f"clip {clip.name} was generated without frames; cannot archive")
    save_clip_frames(d / "frames", clip.frames, fps=clip.audio.fps)
    save_motion_stream(d / "motion.bin", clip.motion, fps=clip.audio.fps)
    np.save(d / "audio_features.npy", clip.audio.features.numpy())
    np.save(d / "frame_energy.npy", clip.audio.frame_energy.numpy())
    np.save(d / "aperture.npy", clip.gt_aperture.numpy())
    if clip.waveform is not None:
        save_wav(d / "audio.wav", clip.waveform)
    meta = {
        "version": CORPUS_VERSION,
        "name": clip.name,
        "identity_seed": clip.identity.seed,
        "clip_seed": clip.seed,
        "n_frames": clip.n_frames,
        "fps": clip.audio.fps,
        "g": {"scale": G_SCALE, "knee": G_KNEE},
        "n_kp": N_KP,
        "mouth_indices": list(MOUTH_INDICES),
        "upper_lip": UPPER_LIP,
        "lower_lip": LOWER_LIP,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_clip(directory: str | Path, with_frames: bool = False) -> Clip:
    """Rebuild a Clip from its archive directory."""
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no clip metadata at {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != CORPUS_VERSION:
        raise DataError(f"unsupported clip version {meta.get('version')} in {d}")
    identity = generate_identity(meta["identity_seed"])
    motion, fps = load_motion_stream(d / "motion.bin")
    features = torch.from_numpy(np.load(d / "audio_features.npy"))
    energy = torch.from_numpy(np.load(d / "frame_energy.npy"))
    audio = AudioFeatureSequence(features=features, fps=fps, frame_energy=energy)
    gt_aperture = torch.from_numpy(np.load(d / "aperture.npy"))
    frames = load_clip_frames(d / "frames")[0] if with_frames else None
    return Clip(
        identity=identity,
        motion=motion,
        audio=audio,
        gt_aperture=gt_aperture,
        name=meta["name"],
        seed=meta["clip_seed"],
        frames=frames,
    )


def generate_corpus(cfg: CorpusConfig, out_dir: str | Path) -> Path:
    """Write the full corpus archive; byte-identical for identical configs."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = _clip_dir_entries(cfg)
    identities: dict[int, SyntheticIdentity] = {}
    for split in ("train", "test"):
        for entry in entries[split]:
            ident = identities.setdefault(
                entry["identity_seed"], generate_identity(entry["identity_seed"])
            )
            clip = generate_clip(
                ident,
                entry["clip_seed"],
                n_frames=entry["n_frames"],
                image_size=(cfg.image_size, cfg.image_size),
                name=Path(entry["path"]).name,
            )
            save_clip(clip, root / entry["path"])
    manifest = {
        "version": CORPUS_VERSION,
        "config": {
            "n_identities": cfg.n_identities,
            "clips_per_identity": cfg.clips_per_identity,
            "frames_per_clip": cfg.frames_per_clip,
            "test_identities": cfg.test_identities,
            "test_clips_per_identity": cfg.test_clips_per_identity,
            "image_size": cfg.image_size,
            "seed": cfg.seed,
        },
        "g": {"scale": G_SCALE, "knee": G_KNEE},
        "n_kp": N_KP,
        "train": entries["train"],
        "test": entries["test"],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_manifest(corpus_dir: str | Path) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no corpus manifest at {path}")
    return json.loads(path.read_text())


def load_split(
    corpus_dir: str | Path, split: str = "train", with_frames: bool = False
) -> list[Clip]:
    """Load every clip of a split from a corpus archive."""
    manifest = load_manifest(corpus_dir)
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    return [
        load_clip(Path(corpus_dir) / entry["path"], with_frames=with_frames)
        for entry in manifest[split]
    ]


def stack_motion(motion: Sequence[MotionParams]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Motion list -> stacked (R, T, E) tensors for batched math."""
    R = torch.stack([m.pose.R for m in motion])
    T = torch.stack([m.pose.T for m in motion])
    E = torch.stack([m.expression for m in motion])
    return R, T, E


def compose_batch(
    canonical: torch.Tensor, R: torch.Tensor, T: torch.Tensor, E: torch.Tensor
) -> torch.Tensor:
    """Batched keypoint composition: (F,3,3), (F,3), (F,n,3) -> (F,n,3)."""
    return torch.einsum("fij,kj->fki", R, canonical) + T[:, None, :] + E
