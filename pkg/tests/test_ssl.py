from itertools import combinations

import numpy as np
import pytest

from xlingtts.autodiff import Linear, Tensor, UsageError, cross_entropy
from xlingtts.corpus import ConfigError
from xlingtts.ssl import (
    DataError,
    KMeans,
    LayerQualityReport,
    PseudoLabelSet,
    SSLEncoder,
    SSLEncoderConfig,
    SSLPretrainer,
    extract_layer,
    extract_layers,
    feature_quality,
    kmeans_fit,
    mask_frames,
    masked_prediction_loss,
    pretrain_iteration,
    run_iterations,
)
from xlingtts.utils import pad_batch

TINY = dict(num_conv_layers=1, num_seq_layers=2, hidden_dim=16, ff_dim=32,
            num_clusters_per_iteration=[8], steps_per_iteration=20)


def best_bipartition(points):
    best = None
    idx = range(len(points))
    for r in range(1, len(points)):
        for left in combinations(idx, r):
            a = [points[i] for i in left]
            b = [points[i] for i in idx if i not in left]
            cost = sum((x - np.mean(a)) ** 2 for x in a) + sum((x - np.mean(b)) ** 2 for x in b)
            if best is None or cost < best[0]:
                best = (cost, sorted([np.mean(a), np.mean(b)]))
    return best[1]


def test_kmeans_examples(rng):
    pts = rng.normal(size=(6, 3))
    res = kmeans_fit(pts, 6, seed=1)
    assert res.distortions[-1] == pytest.approx(0.0, abs=1e-12)
    assert len(set(res.assignments.tolist())) == 6
    line = np.array([[0.0], [1.0], [10.0], [11.0]])
    cents = sorted(kmeans_fit(line, 2, seed=0).centroids[:, 0].tolist())
    assert cents == pytest.approx(best_bipartition([0.0, 1.0, 10.0, 11.0]))
    assert cents == pytest.approx([0.5, 10.5])
    with pytest.raises(ConfigError):
        kmeans_fit(pts, 7)


def test_kmeans_monotone_and_deterministic(rng):
    x = rng.normal(size=(400, 4))
    a, b = kmeans_fit(x, 10, seed=3), kmeans_fit(x, 10, seed=3)
    assert np.all(np.diff(a.distortions) <= 1e-12)
    assert np.array_equal(a.assignments, b.assignments)
    for k in range(10):
        members = x[a.assignments == k]
        if len(members):
            np.testing.assert_allclose(a.centroids[k], members.mean(0), atol=1e-9)
    est = KMeans(n_clusters=10, random_state=3).fit(x)
    assert np.array_equal(est.predict(x), a.assignments)


def test_mask_frames_examples(rng):
    frames = rng.normal(size=(30, 4))
    out, idx = mask_frames(frames, 0.0, 5, seed=0)
    assert len(idx) == 0 and np.array_equal(out, frames)
    out, idx = mask_frames(frames, 1.0, 30, seed=0, mask_vector=np.full(4, 9.0))
    assert len(idx) == 30 and np.all(out == 9.0)
    with pytest.raises(ValueError):
        mask_frames(np.zeros((0, 4)), 0.1, 5, seed=0)


def test_mask_fraction_monte_carlo():
    frac = np.mean([len(mask_frames(np.zeros((100, 1)), 0.08, 5, seed=s)[1]) / 100 for s in range(1000)])
    assert abs(frac - 0.33) < 0.05


def test_config_validation():
    with pytest.raises(ConfigError):
        SSLEncoderConfig(num_seq_layers=1).validate()
    with pytest.raises(ConfigError):
        SSLEncoderConfig(mask_prob=1.5).validate()
    assert SSLEncoderConfig(num_seq_layers=5).middle_layer == 2


def test_extract_layer_contracts(small_corpus, rng):
    cfg = SSLEncoderConfig(**TINY)
    enc = SSLEncoder(rng, cfg, 80)
    utt = small_corpus.test[0]
    feats = extract_layer(enc, utt, 2)
    assert feats.matrix.shape == (utt.num_frames, 16) and feats.layer_index == 2
    assert np.array_equal(feats.matrix, extract_layer(enc, utt, 2).matrix)
    with pytest.raises(UsageError):
        extract_layer(enc, utt, 3)
    mask = np.ones((1, utt.num_frames, 1))
    front = enc.layers(utt.frames[None], mask, upto=0)
    assert len(front) == 1
    np.testing.assert_array_equal(extract_layer(enc, utt, 0).matrix, front[0].data[0])
    # padding a batch with longer utterances leaves each utterance's features unchanged
    batch = extract_layers(enc, [u.frames for u in small_corpus.test[:6]], [1, 2])
    np.testing.assert_allclose(batch[2][0], feats.matrix, atol=1e-10)


def test_loss_uses_masked_positions_only(small_corpus, rng):
    cfg = SSLEncoderConfig(**TINY)
    enc = SSLEncoder(rng, cfg, 80)
    head = Linear(rng, 16, 8)
    frames, mask = pad_batch([u.frames for u in small_corpus.train[:3]])
    labels = rng.integers(0, 8, size=mask.shape[:2])
    span = rng.random(mask.shape[:2]) < 0.3
    loss, logits = masked_prediction_loss(enc, head, frames, mask, span, labels)
    keep = (span[..., None] * mask)
    altered = Tensor(logits.data * keep)
    assert cross_entropy(altered, labels, span[..., None] * mask).item() == pytest.approx(loss.item())


def test_pretrain_iteration_start_and_errors(small_corpus):
    cfg = SSLEncoderConfig(**TINY)
    frames = [u.frames for u in small_corpus.train[:32]]
    total = sum(len(f) for f in frames)
    labels = PseudoLabelSet(np.zeros((8, 80)), np.arange(total) % 8, "base-features")
    _, _, hist = pretrain_iteration(frames, labels, cfg, seed=0)
    assert hist["loss"][0] == pytest.approx(np.log(8), abs=1e-9)
    bad = PseudoLabelSet(np.zeros((8, 80)), np.zeros(total - 1, dtype=int), "base-features")
    with pytest.raises(DataError):
        pretrain_iteration(frames, bad, cfg)


def test_one_iteration_reduces_to_pretrain_iteration(small_corpus):
    cfg = SSLEncoderConfig(**TINY)
    utts = small_corpus.train[:32]
    res = run_iterations(utts, cfg, seed=0)
    assert len(res.label_sets) == 1 and res.label_sets[0].source == "base-features"
    from xlingtts.ssl import fit_labels
    targets = [(u.frames - res.base_mean) / res.base_std for u in utts]
    labels = fit_labels(targets, 8, cfg, 0, "base-features")
    enc, _, _ = pretrain_iteration([u.frames for u in utts], labels, cfg, seed=0)
    for a, b in zip(enc.parameters(), res.encoder.parameters()):
        assert np.array_equal(a.data, b.data)


def test_second_iteration_uses_middle_layer(small_corpus):
    cfg = SSLEncoderConfig(**{**TINY, "num_clusters_per_iteration": [8, 8], "num_seq_layers": 3})
    res = run_iterations(small_corpus.train[:32], cfg, seed=0, validation=small_corpus.validation[:8])
    assert [s.source for s in res.label_sets] == ["base-features", "layer-1-iteration-1"]
    assert all("val_masked_accuracy" in h for h in res.histories)


def test_quality_report_oracles(small_corpus, rng):
    utts = small_corpus.train[:20]
    phones = [u.frame_phonemes() for u in utts]
    vocab = 38
    onehot = [np.eye(vocab)[p] for p in phones]
    used = len(np.unique(np.concatenate(phones)))
    rows = feature_quality(onehot, utts, [used], seed=0)
    assert rows[0]["purity"] == pytest.approx(1.0) and rows[0]["pnmi"] == pytest.approx(1.0)
    noise = [rng.normal(size=(len(p), 8)) for p in phones]
    assert feature_quality(noise, utts, [8], seed=0)[0]["pnmi"] < 0.05


def test_pretrainer_estimator(tiny_ssl, small_corpus):
    assert tiny_ssl.get_params()["random_state"] == 0
    report = tiny_ssl.quality_report_
    assert isinstance(report, LayerQualityReport)
    assert report.to_csv().splitlines()[0] == "layer,K,purity,pnmi,speaker_probe_acc,phoneme_probe_acc"
    means = {l: report.layer_summary(l)["pnmi"] for l in range(3)}
    assert tiny_ssl.layer_ == max(means, key=means.get)
    feats = tiny_ssl.transform(small_corpus.test[:3])
    assert [f.shape for f in feats] == [(u.num_frames, 16) for u in small_corpus.test[:3]]
    clone = SSLPretrainer.from_state(*tiny_ssl.state())
    np.testing.assert_array_equal(clone.transform(small_corpus.test[:1])[0], feats[0])
