"""Checkpoint archives shared by the sync expert, the adapter, and the trainer.

One format for every saved model: a torch-serialized dict carrying the
archive version, a kind tag, the constructor config, the state dict, and
a content hash so corrupted or mismatched files fail loudly instead of
producing silently wrong weights.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .errors import DataError

ARCHIVE_VERSION = 1


def state_dict_hash(state_dict: dict) -> str:
    """Deterministic sha256 over parameter names, shapes, dtypes, and bytes.

    Serialized checkpoint files are not byte-stable across torch versions,
    so the hash is computed from the tensors themselves, sorted by name.
    """
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name]
        t = t.detach().cpu().contiguous() if torch.is_tensor(t) else torch.as_tensor(t)
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_archive(
    path: str | Path,
    kind: str,
    config: dict,
    state_dict: dict,
    extra: dict | None = None,
) -> Path:
    """Write a versioned checkpoint archive; parent directories are created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "archive_version": ARCHIVE_VERSION,
        "kind": kind,
        "config": dict(config),
        "state_dict": {k: v.detach().cpu() if torch.is_tensor(v) else v
                       for k, v in state_dict.items()},
        "extra": dict(extra or {}),
        "hash": state_dict_hash(state_dict),
    }
    torch.save(payload, path)
    return path


def load_archive(path: str | Path, expected_kind: str) -> dict:
    """Read an archive, verifying version, kind tag, and content hash."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:  # unreadable/corrupt file
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "archive_version" not in payload:
        raise DataError(f"{path} is not a checkpoint archive")
    if payload["archive_version"] != ARCHIVE_VERSION:
        raise DataError(
            f"{path}: archive version {payload['archive_version']} unsupported "
            f"(expected {ARCHIVE_VERSION})"
        )
    if payload.get("kind") != expected_kind:
        raise DataError(
            f"{path}: archive holds a '{payload.get('kind')}' model, "
            f"expected '{expected_kind}'"
        )
    if state_dict_hash(payload["state_dict"]) != payload.get("hash"):
        raise DataError(f"{path}: state hash mismatch, file is corrupt")
    return payload
