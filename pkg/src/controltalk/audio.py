"""Audio ingestion and per-video-frame feature extraction.

Audio enters as 16 kHz mono PCM and leaves as one 80-dimensional log-mel
feature row per video frame at exactly 25 fps. The hop is fixed at 640
samples because 16000 / 640 = 25, so audio frames and video frames never
drift. The log-mel encoder is deliberately small and deterministic — a
stand-in for a heavyweight pretrained speech model, behind the same
interface (any callable ``Waveform -> AudioFeatureSequence`` works).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .errors import DataError, DimensionError, ValidationError

SAMPLE_RATE = 16_000
HOP = 640  # samples per video frame: 16000 / 640 = 25 fps exactly
FPS = 25.0
WINDOW = 1024
N_MELS = 80
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    """Mono audio at 16 kHz, samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.isfinite(s).all():
            raise ValidationError("waveform contains non-finite samples")
        if np.abs(s).max(initial=0.0) > 1.0 + 1e-9:
            raise ValidationError("waveform samples exceed [-1, 1]")
        if self.sample_rate != SAMPLE_RATE:
            raise ValidationError(
                f"waveform must be ingested at {SAMPLE_RATE} Hz, got {self.sample_rate}"
            )
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AudioFeatureSequence:
    """Per-video-frame audio features: (n_frames, d_a) at 25 fps.

    ``frame_energy`` carries the per-frame block RMS of the source
    waveform when the sequence came from a real signal; synthetic or
    deserialized sequences may omit it.
    """

    features: torch.Tensor
    fps: float = FPS
    frame_energy: torch.Tensor | None = None

    def __post_init__(self):
        f = torch.as_tensor(self.features, dtype=torch.float64)
        if f.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {tuple(f.shape)}")
        if not torch.isfinite(f).all():
            raise ValidationError("audio features contain non-finite entries")
        object.__setattr__(self, "features", f)
        if self.frame_energy is not None:
            e = torch.as_tensor(self.frame_energy, dtype=torch.float64).reshape(-1)
            if e.shape[0] != f.shape[0]:
                raise DimensionError("frame_energy length disagrees with feature count")
            object.__setattr__(self, "frame_energy", e)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def d_a(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class AudioWindow:
    """A stack of w consecutive feature rows centered on one frame."""

    features: torch.Tensor  # (w, d_a)
    center: int


def load_audio(path: str | Path) -> Waveform:
    """Read a PCM WAV file as mono float64 at 16 kHz.

    Multi-channel audio is downmixed by channel mean. Other sample rates
    are resampled by linear interpolation, with a warning.
    """
    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    except Exception as exc:
        raise DataError(f"could not read WAV file {path}: {exc}") from exc
    if data.size == 0:
        raise DataError(f"audio file {path} has zero samples")

    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if data.dtype == np.uint8:
            samples = (data.astype(np.float64) - 128.0) / 128.0
        else:
            samples = data.astype(np.float64) / float(-info.min)
    else:
        samples = data.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    samples = np.clip(samples, -1.0, 1.0)

    if sr != SAMPLE_RATE:
        warnings.warn(
            f"resampling {path} from {sr} Hz to {SAMPLE_RATE} Hz by linear interpolation",
            stacklevel=2,
        )
        n_out = int(round(len(samples) * SAMPLE_RATE / sr))
        t_in = np.arange(len(samples)) / sr
        t_out = np.arange(n_out) / SAMPLE_RATE
        samples = np.interp(t_out, t_in, samples)

    return Waveform(samples=samples, sample_rate=SAMPLE_RATE)


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write a waveform as 16-bit PCM WAV."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = WINDOW, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    """Triangular mel filters on the rfft frequency grid, shape (n_mels, n_fft//2+1)."""
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    up = (freqs[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - freqs[None, :]) / (upper - center)[:, None]
    return np.clip(np.minimum(up, down), 0.0, None)


_MEL_BANK = mel_filterbank()
_HANN = np.hanning(WINDOW)


def n_frames_for(n_samples: int) -> int:
    """Video/audio frame count for a sample count: round(n / 640)."""
    return int(round(n_samples / HOP))


def block_rms(samples: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    """RMS over non-overlapping 640-sample blocks, one value per frame."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    if n_frames is None:
        n_frames = n_frames_for(len(s))
    padded = np.zeros(n_frames * HOP, dtype=np.float64)
    padded[: min(len(s), len(padded))] = s[: n_frames * HOP]
    blocks = padded.reshape(n_frames, HOP)
    return np.sqrt((blocks**2).mean(axis=1))


def toy_encode(w: Waveform) -> AudioFeatureSequence:
    """Deterministic log-mel encoding: one 80-d row per video frame.

    Each frame i analyzes a Hann-windowed 1024-sample slice centered on
    its 640-sample hop block (zero-padded at the signal edges), takes the
    power spectrum, applies the mel filterbank, floors at 1e-10, and
    takes the natural log.
    """
    s = w.samples
    if len(s) < WINDOW:
        raise DataError(
            f"waveform has {len(s)} samples; need at least one {WINDOW}-sample window"
        )
    n = n_frames_for(len(s))
    half_extra = (WINDOW - HOP) // 2  # 192: window overhang on each side of the block
    rows = np.empty((n, N_MELS), dtype=np.float64)
    for i in range(n):
        start = i * HOP - half_extra
        stop = start + WINDOW
        lo, hi = max(start, 0), min(stop, len(s))
        frame = np.zeros(WINDOW, dtype=np.float64)
        frame[lo - start : hi - start] = s[lo:hi]
        spectrum = np.abs(np.fft.rfft(frame * _HANN)) ** 2
        rows[i] = np.log(np.maximum(_MEL_BANK @ spectrum, LOG_FLOOR))
    return AudioFeatureSequence(
        features=torch.from_numpy(rows),
        fps=FPS,
        frame_energy=torch.from_numpy(block_rms(s, n)),
    )


_SILENT_ROW: torch.Tensor | None = None


def silent_track(n_frames: int) -> AudioFeatureSequence:
    """Feature sequence of pure silence: the toy encoding of all zeros."""
    if n_frames < 1:
        raise ValidationError(f"n_frames must be >= 1, got {n_frames}")
    global _SILENT_ROW
    if _SILENT_ROW is None:
        zeros = Waveform(samples=np.zeros(WINDOW * 2, dtype=np.float64))
        _SILENT_ROW = toy_encode(zeros).features[1]  # interior row, no edge padding
    return AudioFeatureSequence(
        features=_SILENT_ROW.expand(n_frames, -1).clone(),
        fps=FPS,
        frame_energy=torch.zeros(n_frames, dtype=torch.float64),
    )


def frame_window(seq: AudioFeatureSequence, i: int, w: int = 5) -> AudioWindow:
    """Rows i-(w-1)/2 ... i+(w-1)/2 of seq, replicating edge rows."""
    if w < 1 or w % 2 == 0:
        raise ValidationError(f"window size must be odd and positive, got {w}")
    if not 0 <= i < seq.n_frames:
        raise DataError(f"frame index {i} out of range [0, {seq.n_frames})")
    half = (w - 1) // 2
    idx = torch.arange(i - half, i + half + 1).clamp(0, seq.n_frames - 1)
    return AudioWindow(features=seq.features[idx], center=i)


def window_indices(n_frames: int, i: int, w: int = 5) -> torch.Tensor:
    """Clamped index vector used by frame_window; exposed for batch code."""
    half = (w - 1) // 2
    return torch.arange(i - half, i + half + 1).clamp(0, n_frames - 1)
