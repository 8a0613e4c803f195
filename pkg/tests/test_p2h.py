from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from xlingtts.autodiff import Tensor
from xlingtts.p2h import (
    P2HConfig,
    P2HModel,
    P2HNetwork,
    decode_durations,
    make_batch,
    mi_pairs,
    p2h_loss,
)
from xlingtts.utils import length_regulate

GOLDEN = Path(__file__).parent / "golden"
TINY = dict(embed_dim=8, style_dim=4, lang_dim=4, num_heads=2, ff_dim=16, kernel_size=3,
            predictor_hidden=8, style_hidden=8, bottleneck_dim=16)


def tiny_config(**kw):
    return P2HConfig(**{**TINY, "steps": 0, **kw})


# -- length regulator -----------------------------------------------------

def test_length_regulate_examples():
    rows = np.array([["a"], ["b"], ["c"]])
    assert length_regulate(rows, [2, 1, 3])[:, 0].tolist() == list("aabccc")
    x = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(length_regulate(x, [1, 1, 1, 1]), x)
    for bad in ([1, 0, 1, 1], [1, -2, 1, 1], [1, 1, 1]):
        with pytest.raises(ValueError):
            length_regulate(x, bad)


def test_length_regulate_is_row_repetition(rng):
    for _ in range(100):
        p = int(rng.integers(1, 10))
        d = rng.integers(1, 7, size=p)
        x = rng.normal(size=(p, 3))
        out = length_regulate(x, d)
        assert len(out) == sum(int(v) for v in d)
        assert Counter(map(tuple, out)) == Counter({tuple(r): int(n) for r, n in zip(x, d)})


def test_decode_durations_rule():
    assert decode_durations(np.log([0.2, 1.0, 2.4, 2.6, 7.0])).tolist() == [1, 1, 2, 3, 7]


# -- losses ---------------------------------------------------------------

def test_iterative_loss_examples(rng):
    target = rng.normal(size=(2, 5, 4))
    preds = [Tensor(target + v) for v in (0.3, 0.2, -0.1)]
    zeros = [np.zeros((2, 3))] * 3
    total, parts = p2h_loss(preds, target, [Tensor(z) for z in zeros], zeros, [1 / 3] * 3, (1, 1, 1))
    assert parts["feature"].item() == pytest.approx(0.2)
    assert total.item() == pytest.approx(0.2)
    perfect, parts = p2h_loss([Tensor(target)] * 3, target, [Tensor(z) for z in zeros], zeros,
                              [1 / 3] * 3, (1, 1, 1))
    assert perfect.item() == 0.0 and all(v.item() == 0.0 for v in parts.values())


def test_loss_matches_loop_oracle(rng):
    target = rng.normal(size=(2, 4, 3))
    preds = [rng.normal(size=(2, 4, 3)) for _ in range(3)]
    fmask = np.ones((2, 4, 1))
    fmask[1, 3:] = 0
    pmask = np.ones((2, 3, 1))
    pmask[1, 2:] = 0
    var_pred = [rng.normal(size=(2, 3)) for _ in range(3)]
    var_tgt = [rng.normal(size=(2, 3)) for _ in range(3)]
    weights, lambdas = [0.2, 0.3, 0.5], (0.7, 1.3, 0.4)
    total, parts = p2h_loss([Tensor(p) for p in preds], target, [Tensor(v) for v in var_pred], var_tgt,
                            weights, lambdas, fmask, pmask)
    expected = 0.0
    for w, p in zip(weights, preds):
        cells = [abs(p[b, t, c] - target[b, t, c]) for b in range(2) for t in range(4) for c in range(3)
                 if fmask[b, t, 0]]
        expected += w * sum(cells) / len(cells)
    for lam, vp, vt in zip(lambdas, var_pred, var_tgt):
        cells = [(vp[b, i] - vt[b, i]) ** 2 for b in range(2) for i in range(3) if pmask[b, i, 0]]
        expected += lam * sum(cells) / len(cells)
    assert total.item() == pytest.approx(expected, rel=1e-12)
    zero_total, zparts = p2h_loss([Tensor(p) for p in preds], target, [Tensor(v) for v in var_pred], var_tgt,
                                  weights, (0, 0, 0), fmask, pmask)
    assert zero_total.item() == pytest.approx(zparts["feature"].item())


# -- network pieces -------------------------------------------------------

def test_encode_phonemes_contracts(rng):
    net = P2HNetwork(np.random.default_rng(11), P2HConfig(**TINY))
    ph = np.array([[3, 7, 1, 30, 12, 5]])
    out = net.encode_phonemes(ph, [1], np.ones((1, 6, 1))).data
    assert out.shape == (1, 6, 8)
    np.testing.assert_allclose(out, np.load(GOLDEN / "encode_phonemes.npy"), rtol=0, atol=1e-12)
    swapped = ph.copy()
    swapped[0, [0, 5]] = swapped[0, [5, 0]]
    out2 = net.encode_phonemes(swapped, [1], np.ones((1, 6, 1))).data
    assert not np.allclose(out[0, 0], out2[0, 0]) and not np.allclose(out[0, 5], out2[0, 5])
    with pytest.raises(KeyError):
        net.encode_phonemes(np.array([[38]]), [0], np.ones((1, 1, 1)))


def test_predict_variances_and_decode_shapes():
    cfg = P2HConfig(**TINY)
    net = P2HNetwork(np.random.default_rng(0), cfg)
    hidden = Tensor(np.random.default_rng(1).normal(size=(2, 5, cfg.hidden_dim)))
    pmask = np.ones((2, 5, 1))
    for v in net.predict_variances(hidden, pmask):
        assert v.shape == (2, 5)
    from xlingtts.style import alignment_matrix
    align = alignment_matrix([np.array([1, 2, 1, 1, 3])] * 2, 5, 8)
    preds = net.decode(hidden, align, Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 5))), np.ones((2, 8, 1)))
    assert len(preds) == 3 and all(p.shape == (2, 8, 16) for p in preds)


def test_config_validation():
    with pytest.raises(ValueError):
        P2HConfig(decoder_blocks=2).validate()
    with pytest.raises(ValueError):
        P2HConfig(language_conditioning="both").validate()
    with pytest.raises(ValueError):
        P2HConfig(batch_size=4).validate()


def test_mi_pairs_pooling(rng):
    style = Tensor(rng.normal(size=(2, 3, 4)))
    pmask = np.ones((2, 3, 1))
    pmask[1, 2] = 0
    pooled, lang = mi_pairs(style * pmask, pmask, np.array([0, 1]), "utterance")
    np.testing.assert_allclose(pooled.data[1], style.data[1, :2].mean(0))
    rows, lang = mi_pairs(style, pmask, np.array([0, 1]), "phoneme")
    assert rows.shape == (5, 4) and lang.tolist() == [0, 0, 0, 1, 1]
    rows, _ = mi_pairs(style, pmask, np.array([0, 1]), "phoneme", max_pairs=3)
    assert rows.shape == (3, 4)


# -- estimator ------------------------------------------------------------

def test_gradients_reach_every_parameter(small_corpus, tiny_targets):
    model = P2HModel(tiny_config(), random_state=0).fit(small_corpus.train[:16], tiny_targets[:16])
    utts = small_corpus.train[:16]
    batch = make_batch(utts, tiny_targets[:16], model.frame_mean_, model.frame_std_)
    total, parts, _ = model._forward_train(batch, model.q_)
    assert "mi" in parts and "style" in parts
    total.backward()
    dead = [p.name for p in model.network_.parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []
    assert all(p.grad is None for p in model.q_.parameters())


def test_ground_truth_durations_fix_length(small_corpus, tiny_targets):
    model = P2HModel(tiny_config(), random_state=0).fit(small_corpus.train[:16], tiny_targets[:16])
    utts = small_corpus.test[:5]
    out = model.predict([u.phonemes for u in utts], [u.language_id for u in utts], [u.style_id for u in utts],
                        durations=[u.durations for u in utts])
    for o, u in zip(out, utts):
        assert o["features"].shape == (u.num_frames, 16)
        assert len(o["blocks"]) == 3
    free = model.predict([u.phonemes for u in utts], [0] * 5, [1] * 5)
    for o, u in zip(free, utts):
        assert o["durations"].min() >= 1 and len(o["features"]) == o["durations"].sum()
        np.testing.assert_array_equal(o["durations"], o["variances"].durations())
    with pytest.raises(KeyError):
        model.predict([np.array([99])], [0], [0])
    with pytest.raises(KeyError):
        model.predict([np.array([1, 2])], [0], [5])


def test_fit_rejects_misaligned_targets(small_corpus, tiny_targets):
    with pytest.raises(ValueError):
        P2HModel(tiny_config()).fit(small_corpus.train[:2], [tiny_targets[1], tiny_targets[0]])
    with pytest.raises(ValueError):
        P2HModel(tiny_config()).fit(small_corpus.train[:1], [tiny_targets[0][:, :3]])


def test_no_adaptor_feeds_zero_style(small_corpus, tiny_targets):
    model = P2HModel(tiny_config(adaptor_enabled=False, mi_enabled=False)).fit(
        small_corpus.train[:16], tiny_targets[:16])
    utts = small_corpus.test[:3]
    out = model.predict([u.phonemes for u in utts], [0] * 3, [0, 1, 2])
    assert all(not np.any(o["style"]) for o in out)
    assert all(not np.any(e) for e in model.style_embeddings(utts))


def test_training_smoke_and_roundtrip(small_corpus, tiny_targets):
    cfg = P2HConfig(bottleneck_dim=16, steps=200)
    rows = []
    model = P2HModel(cfg, random_state=0).fit(small_corpus.train[:64], tiny_targets[:64], log_rows=rows)
    losses = [r["total"] for r in rows]
    assert len(rows) == 200
    assert np.mean(losses[-10:]) <= 0.5 * losses[0]
    assert np.isfinite([r["mi_estimate"] for r in rows]).all()
    tensors, meta = model.state()
    clone = P2HModel.from_state(tensors, meta)
    utts = small_corpus.test[:4]
    args = ([u.phonemes for u in utts], [u.language_id for u in utts], [u.style_id for u in utts])
    for a, b in zip(model.predict(*args), clone.predict(*args)):
        np.testing.assert_array_equal(a["features"], b["features"])
    # distinct styles give distinct predicted pitch on the same text
    ph = utts[0].phonemes
    out = model.predict([ph] * 3, [0] * 3, [0, 1, 2])
    pitches = [o["variances"].pitch for o in out]
    assert min(np.linalg.norm(pitches[i] - pitches[j]) for i in range(3) for j in range(i + 1, 3)) > 0
    styles = model.style_embeddings(utts[:2], source="predictor")
    assert styles[0].shape == (utts[0].num_phonemes, cfg.style_dim)
