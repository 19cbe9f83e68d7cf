"""Command-line entry point: one executable, five subcommands.

``controltalk synth-corpus | train-sync | train | infer | eval`` wire the
library modules into reproducible runs.  Every command writes a
``run_manifest.json`` (config, config hash, seeds, library versions) into
its output directory, and exits 0 on success, 2 on configuration errors,
3 on data errors, and 4 on numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from .audio import AudioFeatureSequence, load_audio, silent_track, toy_encode
from .checkpoint import state_dict_hash
from .config import RunConfig, load_config, write_manifest
from .corpus import generate_corpus, load_clip, load_split, render_motion
from .errors import ConfigError, ControlTalkError, DataError, NumericError
from .evaluation import evaluate
from .model import infer_sequence, load_model
from .motion import retarget_motion, save_motion_stream
from .renderer import save_clip_frames
from .sync import load_expert, save_expert, train_sync
from .training import train


def _with_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Apply the handful of flags that shadow config fields."""
    from dataclasses import replace

    updates = {}
    for flag, field in (("corpus_dir", "corpus_dir"), ("out", "out_dir"),
                        ("expert", "expert_path"), ("checkpoint", "model_path"),
                        ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            updates[field] = v
    return replace(cfg, **updates) if updates else cfg


def cmd_synth_corpus(cfg: RunConfig, args: argparse.Namespace) -> int:
    import hashlib

    root = generate_corpus(cfg.corpus, cfg.corpus_dir)
    manifest_hash = hashlib.sha256((root / "manifest.json").read_bytes()).hexdigest()
    write_manifest(root, "synth-corpus", cfg, {"corpus_manifest_sha256": manifest_hash})
    n_train = cfg.corpus.n_identities * cfg.corpus.clips_per_identity
    print(f"corpus written to {root} ({n_train} train clips)")
    return 0


def cmd_train_sync(cfg: RunConfig, args: argparse.Namespace) -> int:
    clips = load_split(cfg.corpus_dir, "train", with_frames=True)
    expert, report = train_sync(clips, cfg.sync)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = cfg.resolved_expert_path()
    save_expert(path, expert, extra={"report": report})
    (out / "sync_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train-sync", cfg, {
        "expert_path": str(path),
        "expert_hash": state_dict_hash(expert.state_dict()),
        "holdout_accuracy": report["holdout_accuracy"],
    })
    print(f"sync expert saved to {path} (holdout accuracy {report['holdout_accuracy']:.4f})")
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    expert_path = cfg.resolved_expert_path()
    if not Path(expert_path).exists():
        raise DataError(f"sync expert checkpoint not found: {expert_path}")
    expert = load_expert(expert_path)
    clips = load_split(cfg.corpus_dir, "train", with_frames=True)
    model_path = train(clips, expert, cfg.train, cfg.out_dir, resume=args.resume)
    model = load_model(model_path)
    write_manifest(cfg.out_dir, "train", cfg, {
        "model_path": str(model_path),
        "model_hash": state_dict_hash(model.state_dict()),
        "expert_path": str(expert_path),
        "resumed": bool(args.resume),
    })
    print(f"adapter saved to {model_path}")
    return 0


def _load_driving_audio(spec: str, n_frames_hint: int) -> AudioFeatureSequence:
    """Audio argument: clip directory, WAV file, or 'silent[:N]'."""
    if spec == "silent":
        return silent_track(n_frames_hint)
    if spec.startswith("silent:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError as e:
            raise ConfigError(f"bad silent track length in {spec!r}") from e
        return silent_track(n)
    p = Path(spec)
    if p.is_dir():
        return load_clip(p).audio
    if p.suffix.lower() == ".wav":
        return toy_encode(load_audio(p))
    raise DataError(f"driving audio {spec!r} is neither a clip directory, a .wav, nor 'silent'")


def cmd_infer(cfg: RunConfig, args: argparse.Namespace) -> int:
    model_path = cfg.resolved_model_path()
    if not Path(model_path).exists():
        raise DataError(f"model checkpoint not found: {model_path}")
    model = load_model(model_path)

    source = load_clip(args.source)
    if args.single_image and args.motion is None:
        raise ConfigError("single-image mode needs a driving motion stream (--motion)")
    if args.motion is not None:
        driver = load_clip(args.motion)
        motion = [retarget_motion(source.identity.canonical, m) for m in driver.motion]
    else:
        motion = list(source.motion)

    audio = _load_driving_audio(args.audio, len(motion))
    n = min(len(motion), audio.features.shape[0])
    motion = motion[:n]
    if audio.features.shape[0] != n:
        audio = AudioFeatureSequence(
            features=audio.features[:n], fps=audio.fps,
            frame_energy=None if audio.frame_energy is None else audio.frame_energy[:n],
        )

    from dataclasses import replace

    icfg = cfg.infer
    if args.alpha is not None:
        icfg = replace(icfg, alpha=args.alpha,
                       allow_exaggeration=icfg.allow_exaggeration or args.exaggerate)
    if args.no_silent_prepass:
        icfg = replace(icfg, use_silent_prepass=False)

    edited, aperture = infer_sequence(model, source.identity, motion, audio, icfg)
    size = (args.size, args.size)
    frames = render_motion(source.identity, edited, size=size)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_clip_frames(out / "frames", frames, fps=audio.fps)
    save_motion_stream(out / "motion.bin", edited, fps=audio.fps)
    with (out / "aperture.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "aperture"])
        for i, a in enumerate(aperture.tolist()):
            w.writerow([i, f"{a:.10f}"])
    write_manifest(out, "infer", cfg, {
        "model_path": str(model_path),
        "model_hash": state_dict_hash(model.state_dict()),
        "source": str(args.source),
        "driving_audio": args.audio,
        "driving_motion": None if args.motion is None else str(args.motion),
        "single_image": bool(args.single_image),
        "alpha": icfg.alpha,
        "silent_prepass": icfg.use_silent_prepass,
        "n_frames": n,
        "image_size": args.size,
    })
    print(f"wrote {n} frames to {out / 'frames'} (alpha={icfg.alpha})")
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    model_path = cfg.resolved_model_path()
    expert_path = cfg.resolved_expert_path()
    for p, what in ((model_path, "model"), (expert_path, "sync expert")):
        if not Path(p).exists():
            raise DataError(f"{what} checkpoint not found: {p}")
    model = load_model(model_path)
    expert = load_expert(expert_path)
    clips = load_split(cfg.corpus_dir, args.split, with_frames=True)
    report = evaluate(model, expert, clips, cfg.eval)
    out = Path(cfg.out_dir)
    report.save(out)
    write_manifest(out, "eval", cfg, {
        "model_path": str(model_path),
        "expert_path": str(expert_path),
        "split": args.split,
        "aggregate": report.aggregate,
    })
    agg = " ".join(f"{k}={v:.4f}" for k, v in sorted(report.aggregate.items()))
    print(f"eval report written to {out / 'report.json'}\n{agg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="controltalk",
        description="Audio-conditioned editing of implicit facial keypoints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (config: out_dir)")
        p.add_argument("--corpus-dir", dest="corpus_dir", help="corpus directory")
        p.add_argument("--seed", type=int, help="run seed recorded in manifests")

    p = sub.add_parser("synth-corpus", help="generate the procedural corpus")
    common(p)
    p.set_defaults(fn=cmd_synth_corpus)

    p = sub.add_parser("train-sync", help="train the audio-visual sync expert")
    common(p)
    p.add_argument("--expert", help="where to write the expert checkpoint")
    p.set_defaults(fn=cmd_train_sync)

    p = sub.add_parser("train", help="train the audio-to-expression adapter")
    common(p)
    p.add_argument("--expert", help="trained sync expert checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from saved train state")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="drive a face with new audio")
    common(p)
    p.add_argument("--checkpoint", help="trained adapter checkpoint")
    p.add_argument("--source", required=True, help="source clip directory (identity)")
    p.add_argument("--audio", required=True,
                   help="driving audio: clip directory, .wav file, or 'silent[:N]'")
    p.add_argument("--motion", help="driving motion clip directory (cross-identity)")
    p.add_argument("--single-image", action="store_true",
                   help="treat the source as a still image; requires --motion for pose")
    p.add_argument("--alpha", type=float, default=None,
                   help="edit intensity, 0 disables editing (default 0.5)")
    p.add_argument("--exaggerate", action="store_true", help="allow alpha > 1")
    p.add_argument("--no-silent-prepass", action="store_true",
                   help="skip the silent-audio mouth-closing prepass")
    p.add_argument("--size", type=int, default=64, help="square render size in pixels")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score a trained adapter on a corpus split")
    common(p)
    p.add_argument("--checkpoint", help="trained adapter checkpoint")
    p.add_argument("--expert", help="trained sync expert checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _with_overrides(load_config(args.config), args)
        torch.manual_seed(cfg.seed)
        return args.fn(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ControlTalkError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
