import dataclasses
import hashlib

import numpy as np
import pytest

from xlingtts.corpus import (
    ConfigError,
    CorpusConfig,
    LanguageSpec,
    StyleSpec,
    Utterance,
    allowed_in_training,
    build_world,
    emit_corpus,
    load_corpus,
    prosody,
    read_manifest,
    render_frames,
    sample_utterance,
)
from xlingtts.metrics import pitch_contour_correlation, probe_accuracy

from .conftest import SMALL_CORPUS


def quiet(**kw):
    return dataclasses.replace(SMALL_CORPUS, noise_sigma=0.0, **kw)


def flat_style(mult=1.0):
    return StyleSpec(0, 0.0, 0.0, 1.0, 0.0, (mult, mult), 0.0, 0.0)


def test_world_is_deterministic():
    a, b = build_world(SMALL_CORPUS), build_world(SMALL_CORPUS)
    assert np.array_equal(a.templates, b.templates)
    for sa, sb in zip(a.speakers, b.speakers):
        assert np.array_equal(sa.matrix(), sb.matrix()) and np.array_equal(sa.bias, sb.bias)


def test_default_inventories():
    world = build_world(CorpusConfig())
    a, b = (set(lang.phonemes.tolist()) for lang in world.languages)
    assert (len(a), len(b), len(a & b)) == (20, 24, 6)
    assert world.languages[0].final_lengthening != world.languages[1].final_lengthening


def test_speakers_separated_and_invertible(rng):
    world = build_world(dataclasses.replace(SMALL_CORPUS, num_speakers=3))
    assert len(world.speakers) == 3
    cfg = world.config
    for i, s in enumerate(world.speakers):
        z = rng.normal(size=(5, cfg.mel_dim))
        np.testing.assert_allclose(s.invert(s.apply(z)), z, atol=1e-10)
        for t in world.speakers[i + 1:]:
            dist = np.linalg.norm(s.matrix() - t.matrix()) + np.linalg.norm(s.bias - t.bias)
            assert dist >= cfg.min_timbre_distance


@pytest.mark.parametrize("kw", [dict(lang_a_phonemes=3), dict(num_speakers=2), dict(num_styles=1),
                                dict(length_range=(2, 5)), dict(heldout_scope="none")])
def test_bad_config_rejected(kw):
    with pytest.raises(ConfigError):
        build_world(dataclasses.replace(SMALL_CORPUS, **kw))


def test_unknown_ids_rejected():
    world = build_world(SMALL_CORPUS)
    with pytest.raises(KeyError):
        sample_utterance(world, 2, 0, 0)
    with pytest.raises(KeyError):
        sample_utterance(world, 0, 9, 0)


def test_duration_rules():
    world = build_world(SMALL_CORPUS)
    world.base_durations[:] = 4
    phon = np.array([0, 1, 2, 3, 4])
    plain = LanguageSpec(0, phon, 1.0, 0.0)
    durs, _, _ = prosody(world, phon, plain, flat_style())
    assert durs.tolist() == [4] * 5
    lengthened = LanguageSpec(0, phon, 1.5, 0.0)
    durs, _, _ = prosody(world, phon, lengthened, flat_style())
    assert durs.tolist() == [4, 4, 4, 4, 6]
    durs, _, _ = prosody(world, phon, plain, flat_style(0.1))
    assert durs.min() >= 1


def test_render_quiet_identity_speaker():
    world = build_world(quiet(pitch_track_noise=0.0))
    spk = world.speakers[0]
    spk.scale[:] = 1.0
    spk.bias[:] = 0.0
    spk.rotation = np.eye(world.config.mel_dim)
    utt = Utterance(0, 0, 0, np.array([3, 5]), np.array([2, 3]), np.zeros(2), np.zeros(2), None, 0)
    frames = render_frames(utt, spk, world)
    np.testing.assert_array_equal(frames, np.repeat(world.templates[[3, 5]], [2, 3], axis=0))
    # hand-evaluated pitch and energy terms on a single phoneme
    utt = Utterance(0, 0, 0, np.array([7]), np.array([2]), np.array([0.5]), np.array([0.2]), None, 0)
    cfg = world.config
    row = world.templates[7] * (1 + cfg.energy_gain * 0.2) + cfg.pitch_gain * 0.5 * world.pitch_pattern
    row[cfg.pitch_channel] = 0.5
    np.testing.assert_allclose(render_frames(utt, spk, world), np.stack([row, row]), atol=1e-14)


def test_speakers_differ_only_by_timbre():
    world = build_world(SMALL_CORPUS)
    a = sample_utterance(world, 0, 1, 1, seed=42)
    b = sample_utterance(world, 0, 2, 1, seed=42)
    clean_world = build_world(quiet())
    clean = render_frames(a, clean_world.speakers[1], clean_world)
    # frames_b - frames_a == timbre_b(clean) - timbre_a(clean), noise cancels
    z = world.speakers[1].invert(clean)
    np.testing.assert_allclose(b.frames - a.frames,
                               world.speakers[2].apply(z) - world.speakers[1].apply(z), atol=1e-9)


def test_utterance_invariants_and_determinism(small_corpus):
    for utt in small_corpus.train[:30]:
        assert utt.num_frames == utt.durations.sum()
        assert utt.durations.min() >= 1
        assert set(utt.phonemes.tolist()) <= set(small_corpus.world.languages[utt.language_id].phonemes.tolist())
    world = build_world(SMALL_CORPUS)
    u1 = sample_utterance(world, 1, 2, 1, seed=5)
    u2 = sample_utterance(build_world(SMALL_CORPUS), 1, 2, 1, seed=5)
    assert u1.to_bytes(0) == u2.to_bytes(0)


def test_style_contours():
    world = build_world(CorpusConfig())
    lang = world.languages[0]
    phon = np.tile(lang.phonemes[:4], 4)
    contours = [prosody(world, phon, lang, s)[1] for s in world.styles]
    for i in range(len(contours)):
        for j in range(i + 1, len(contours)):
            assert pitch_contour_correlation(contours[i], contours[j]) < 0.5
    u1 = sample_utterance(world, 0, 1, 2, seed=3)
    u2 = sample_utterance(world, 0, 3, 2, seed=3)
    pc = world.config.pitch_channel
    assert pitch_contour_correlation(u1.frames[:, pc], u2.frames[:, pc]) > 0.9


def test_heldout_split_rule(small_corpus):
    cfg = small_corpus.world.config
    for utt in small_corpus.train + small_corpus.validation:
        assert allowed_in_training(cfg, utt.language_id, utt.speaker_id, utt.style_id)
    assert not any(u.language_id == 0 and u.speaker_id == 0 and u.style_id == 0 for u in small_corpus.train)
    assert any(u.language_id == 1 and u.speaker_id == 0 and u.style_id == 0 for u in small_corpus.train)
    assert any(u.language_id == 0 and u.speaker_id == 0 and u.style_id == 0 for u in small_corpus.test)


def test_pair_scope_is_narrower():
    cfg = dataclasses.replace(SMALL_CORPUS, heldout_scope="pair")
    assert allowed_in_training(cfg, 0, 0, 1) and not allowed_in_training(cfg, 0, 0, 0)
    assert not allowed_in_training(SMALL_CORPUS, 0, 0, 1)


def test_emit_and_reload(tmp_path, small_corpus):
    summary = emit_corpus(SMALL_CORPUS, tmp_path / "a", small_corpus)
    rows = read_manifest(tmp_path / "a")
    total = sum(len(v) for v in small_corpus.splits.values())
    assert len(rows) == summary["num_utterances"] == total
    again = emit_corpus(SMALL_CORPUS, tmp_path / "b")
    assert again["manifest_sha256"] == summary["manifest_sha256"]
    for name in ("train-000.bin", "test-001.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    loaded = load_corpus(tmp_path / "a")
    for split in ("train", "test"):
        for x, y in zip(loaded.splits[split], small_corpus.splits[split]):
            assert x.uid == y.uid and np.array_equal(x.frames, y.frames)
            assert np.array_equal(x.durations, y.durations)


def test_manifest_hash_is_frozen(tmp_path):
    cfg = dataclasses.replace(SMALL_CORPUS, n_train=8, n_validation=2, n_test=4, shard_size=5)
    summary = emit_corpus(cfg, tmp_path)
    digest = hashlib.sha256((tmp_path / "manifest.tsv").read_bytes()).hexdigest()
    assert digest == summary["manifest_sha256"]
    assert summary["config_hash"] == emit_corpus(cfg, tmp_path / "again")["config_hash"]


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_corpus(SMALL_CORPUS, blocker / "sub")


def test_raw_frames_reveal_speaker(small_corpus):
    utts = small_corpus.train
    feats = np.stack([u.frames.mean(axis=0) for u in utts])
    labels = np.array([u.speaker_id for u in utts])
    result = probe_accuracy(feats, labels, np.arange(len(utts)) % 2 == 0)
    assert result.accuracy > 0.9
