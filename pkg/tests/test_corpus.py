"""Tests for the procedural talking-face corpus and its ground-truth law."""

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from controltalk.audio import HOP, AudioFeatureSequence, Waveform, block_rms, toy_encode
from controltalk.corpus import (
    G_KNEE,
    G_SCALE,
    LOWER_LIP,
    MOUTH_INDICES,
    N_KP,
    TEMPLATE_BOUND,
    UPPER_LIP,
    CorpusConfig,
    aperture_law,
    aperture_oracle,
    compose_batch,
    expression_for_aperture,
    generate_clip,
    generate_corpus,
    generate_identity,
    load_clip,
    load_manifest,
    load_split,
    save_clip,
    stack_motion,
)
from controltalk.errors import ConfigError, DataError, ValidationError
from controltalk.motion import compose_keypoints
from controltalk.renderer import mouth_aperture


@pytest.fixture(scope="module")
def identity():
    return generate_identity(7)


@pytest.fixture(scope="module")
def clip(identity):
    return generate_clip(identity, 42, n_frames=40)


class TestApertureLaw:
    def test_zero_energy_closes_mouth(self):
        assert aperture_law(0.0) == 0.0

    def test_knee_point_value(self):
        # 0.25 * 0.1 / (0.1 + 0.1)
        assert aperture_law(0.1) == pytest.approx(0.125, abs=1e-15)

    def test_strictly_increasing(self):
        u = np.linspace(0.0, 2.0, 500)
        a = aperture_law(u)
        assert np.all(np.diff(a) > 0)

    def test_saturates_below_scale(self):
        assert aperture_law(1e9) < G_SCALE
        assert aperture_law(np.array([0.0, 0.5, 10.0])).max() < G_SCALE


class TestGenerateIdentity:
    def test_same_seed_identical(self):
        a, b = generate_identity(3), generate_identity(3)
        assert torch.equal(a.canonical, b.canonical)
        assert torch.equal(a.appearance.colors, b.appearance.colors)
        assert torch.equal(a.appearance.radii, b.appearance.radii)
        assert torch.equal(a.appearance.background, b.appearance.background)

    def test_different_seeds_differ(self):
        assert not torch.equal(generate_identity(1).canonical, generate_identity(2).canonical)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_invariants_hold_for_any_seed(self, seed):
        ident = generate_identity(seed)
        assert ident.canonical.shape == (N_KP, 3)
        assert ident.canonical.abs().max() <= TEMPLATE_BOUND
        assert torch.equal(ident.canonical[UPPER_LIP], ident.canonical[LOWER_LIP])

    def test_separated_lips_rejected(self, identity):
        bad = identity.canonical.clone()
        bad[LOWER_LIP, 1] += 0.01
        with pytest.raises(ValidationError):
            type(identity)(canonical=bad, appearance=identity.appearance, seed=0)


class TestGenerateClip:
    def test_deterministic(self, identity, clip):
        again = generate_clip(identity, 42, n_frames=40)
        assert torch.equal(clip.gt_aperture, again.gt_aperture)
        assert torch.equal(clip.audio.features, again.audio.features)
        assert torch.equal(clip.frames[0].pixels, again.frames[0].pixels)
        assert torch.equal(clip.motion[5].expression, again.motion[5].expression)

    def test_lengths_agree(self, clip):
        assert clip.n_frames == 40
        assert clip.audio.n_frames == 40
        assert len(clip.frames) == 40
        assert clip.gt_aperture.shape == (40,)

    def test_has_silence_gaps_with_closed_mouth(self, clip):
        silent = clip.gt_aperture == 0.0
        assert silent.any(), "pseudo-speech should contain silence gaps"
        assert (~silent).any(), "pseudo-speech should contain voiced frames"
        # gaps are frame-aligned: zero aperture means a digitally silent block
        idx = int(silent.nonzero()[0])
        block = clip.waveform.samples[idx * HOP : (idx + 1) * HOP]
        assert np.all(block == 0.0)

    def test_aperture_matches_rendered_geometry(self, clip):
        """gt_aperture equals the aperture measured on composed keypoints."""
        for f in range(0, clip.n_frames, 7):
            k = compose_keypoints(clip.identity.canonical, clip.motion[f])
            measured = mouth_aperture(k, UPPER_LIP, LOWER_LIP)
            assert abs(measured - clip.gt_aperture[f].item()) < 1e-9

    def test_aperture_follows_law_of_block_rms(self, clip):
        energy = block_rms(clip.waveform.samples, clip.n_frames)
        expected = aperture_law(energy)
        assert np.allclose(clip.gt_aperture.numpy(), expected, atol=1e-12)

    def test_pose_stays_within_bounds(self, clip):
        # yaw/pitch <= 15 degrees -> rotation angle <= ~21.5 degrees total;
        # check the conservative bound via the rotation's deviation from identity
        for m in clip.motion[::5]:
            angle = torch.arccos(((torch.trace(m.pose.R) - 1.0) / 2.0).clamp(-1, 1))
            assert angle <= np.deg2rad(22.0)

    def test_too_short_clip_rejected(self, identity):
        with pytest.raises(ConfigError):
            generate_clip(identity, 1, n_frames=10)

    def test_render_frames_optional(self, identity):
        bare = generate_clip(identity, 42, n_frames=40, render_frames=False)
        assert bare.frames is None
        assert torch.equal(bare.gt_aperture, generate_clip(identity, 42, n_frames=40).gt_aperture)


class TestApertureOracle:
    def test_matches_clip_ground_truth_exactly(self, clip):
        assert torch.equal(aperture_oracle(clip.audio), clip.gt_aperture)

    def test_waveform_route_matches(self, clip):
        assert torch.allclose(aperture_oracle(clip.waveform), clip.gt_aperture, atol=1e-12)

    def test_silent_track_all_zeros(self):
        silent = Waveform(samples=np.zeros(HOP * 30))
        assert torch.equal(aperture_oracle(silent), torch.zeros(30, dtype=torch.float64))

    def test_louder_audio_opens_wider(self, clip):
        doubled = Waveform(samples=np.clip(clip.waveform.samples * 2.0, -1.0, 1.0))
        base = aperture_oracle(clip.waveform)
        loud = aperture_oracle(doubled)
        voiced = base > 0
        assert (loud[voiced] > base[voiced]).all()
        assert torch.equal(loud[~voiced], base[~voiced])

    def test_foreign_features_rejected(self, clip):
        foreign = AudioFeatureSequence(
            features=clip.audio.features.clone(), fps=clip.audio.fps, frame_energy=None
        )
        with pytest.raises(DataError):
            aperture_oracle(foreign)

    def test_unknown_type_rejected(self):
        with pytest.raises(DataError):
            aperture_oracle(np.zeros(100))


class TestCrossIdentityOracle:
    def test_retargeted_motion_reproduces_aperture(self, clip):
        """Driving any identity with clip B's motion keeps B's aperture curve."""
        other = generate_identity(555)
        for f in range(0, clip.n_frames, 5):
            k = compose_keypoints(other.canonical, clip.motion[f])
            measured = mouth_aperture(k, UPPER_LIP, LOWER_LIP)
            assert abs(measured - clip.gt_aperture[f].item()) < 1e-6


class TestExpressionForAperture:
    def test_only_lips_move(self):
        ap = torch.tensor([0.1, 0.2], dtype=torch.float64)
        e = expression_for_aperture(ap)
        assert e.shape == (2, N_KP, 3)
        mask = torch.ones(N_KP, dtype=torch.bool)
        mask[UPPER_LIP] = mask[LOWER_LIP] = False
        assert torch.equal(e[:, mask], torch.zeros(2, N_KP - 2, 3, dtype=torch.float64))

    def test_lips_split_the_aperture(self):
        e = expression_for_aperture(torch.tensor([0.2], dtype=torch.float64))
        assert e[0, UPPER_LIP, 1] == -0.1
        assert e[0, LOWER_LIP, 1] == 0.1
        gap = torch.linalg.norm(e[0, UPPER_LIP] - e[0, LOWER_LIP])
        assert gap == pytest.approx(0.2, abs=1e-15)


class TestArchive:
    def test_clip_round_trip(self, clip, tmp_path):
        save_clip(clip, tmp_path / "c0")
        loaded = load_clip(tmp_path / "c0", with_frames=True)
        assert loaded.name == clip.name
        assert torch.equal(loaded.gt_aperture, clip.gt_aperture)
        assert torch.equal(loaded.audio.features, clip.audio.features)
        assert torch.equal(loaded.audio.frame_energy, clip.audio.frame_energy)
        assert torch.equal(loaded.motion[3].expression, clip.motion[3].expression)
        assert torch.equal(loaded.motion[3].pose.R, clip.motion[3].pose.R)
        # frames pass through 8-bit PNG: exact up to quantization
        diff = (loaded.frames[0].pixels - clip.frames[0].pixels).abs().max()
        assert diff <= 0.5 / 255 + 1e-12

    def test_missing_archive_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_clip(tmp_path / "nowhere")

    def test_version_mismatch_rejected(self, clip, tmp_path):
        save_clip(clip, tmp_path / "c1")
        meta = json.loads((tmp_path / "c1" / "meta.json").read_text())
        meta["version"] = 999
        (tmp_path / "c1" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(DataError):
            load_clip(tmp_path / "c1")

    def test_unrendered_clip_cannot_be_archived(self, identity, tmp_path):
        bare = generate_clip(identity, 42, n_frames=40, render_frames=False)
        with pytest.raises(DataError):
            save_clip(bare, tmp_path / "c2")


@pytest.fixture(scope="module")
def small_cfg():
    return CorpusConfig(
        n_identities=2,
        clips_per_identity=1,
        frames_per_clip=30,
        test_identities=1,
        test_clips_per_identity=1,
        seed=5,
    )


@pytest.fixture(scope="module")
def corpus_dir(small_cfg, tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(small_cfg, root)


class TestGenerateCorpus:

    def test_manifest_shape(self, corpus_dir, small_cfg):
        manifest = load_manifest(corpus_dir)
        assert len(manifest["train"]) == 2
        assert len(manifest["test"]) == 1
        assert manifest["g"] == {"scale": G_SCALE, "knee": G_KNEE}
        assert manifest["config"]["seed"] == small_cfg.seed
        for entry in manifest["train"] + manifest["test"]:
            assert (corpus_dir / entry["path"] / "meta.json").exists()

    def test_split_loads(self, corpus_dir):
        train = load_split(corpus_dir, "train")
        test = load_split(corpus_dir, "test", with_frames=True)
        assert len(train) == 2 and len(test) == 1
        assert test[0].frames is not None and train[0].frames is None
        # train and test identities are disjoint
        assert {c.identity.seed for c in train}.isdisjoint({c.identity.seed for c in test})

    def test_unknown_split_rejected(self, corpus_dir):
        with pytest.raises(ConfigError):
            load_split(corpus_dir, "validation")

    def test_regeneration_is_byte_identical(self, small_cfg, corpus_dir, tmp_path):
        again = generate_corpus(small_cfg, tmp_path / "again")
        assert (again / "manifest.json").read_bytes() == (corpus_dir / "manifest.json").read_bytes()
        entry = load_manifest(corpus_dir)["train"][0]["path"]
        for name in ("aperture.npy", "audio_features.npy", "motion.bin", "meta.json"):
            assert (again / entry / name).read_bytes() == (corpus_dir / entry / name).read_bytes()

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            CorpusConfig(n_identities=0)
        with pytest.raises(ConfigError):
            CorpusConfig(frames_per_clip=10)


class TestBatchedComposition:
    def test_matches_per_frame_compose(self, clip):
        R, T, E = stack_motion(clip.motion)
        batched = compose_batch(clip.identity.canonical, R, T, E)
        for f in range(0, clip.n_frames, 9):
            single = compose_keypoints(clip.identity.canonical, clip.motion[f])
            assert torch.allclose(batched[f], single, atol=1e-15)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=500))
    def test_aperture_always_in_law_range(self, seed):
        ident = generate_identity(seed)
        c = generate_clip(ident, seed + 9, n_frames=28, render_frames=False)
        assert (c.gt_aperture >= 0).all()
        assert (c.gt_aperture < G_SCALE).all()

    def test_mouth_indices_are_distinct_slots(self):
        assert len(set(MOUTH_INDICES)) == 4
        assert UPPER_LIP in MOUTH_INDICES and LOWER_LIP in MOUTH_INDICES
