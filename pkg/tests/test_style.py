import numpy as np
import pytest

from xlingtts.autodiff import Adam, ShapeError, Tensor
from xlingtts.style import (
    QTrainer,
    StyleEncoder,
    StylePredictor,
    VariationalPosterior,
    alignment_matrix,
    mel_align,
    mel_align_batch,
    q_update_step,
    style_predictor_loss,
    vclub,
    vclub_estimate,
)


def test_mel_align_examples(rng):
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(mel_align(x, [1] * 5), x)
    out = mel_align(np.array([[1.0], [3.0], [5.0], [7.0]]), [2, 2])
    np.testing.assert_allclose(out[:, 0], [2.0, 6.0])
    np.testing.assert_allclose(mel_align(np.full((6, 2), 4.0), [1, 3, 2]), 4.0)
    with pytest.raises(ValueError):
        mel_align(x, [2, 2])
    with pytest.raises(ValueError):
        mel_align(x, [5, 0])


def test_mel_align_conserves_mass(rng):
    for _ in range(20):
        d = rng.integers(1, 6, size=rng.integers(1, 9))
        frames = rng.normal(size=(d.sum(), 4))
        out = mel_align(frames, d)
        np.testing.assert_allclose((out * d[:, None]).sum(0), frames.sum(0), atol=1e-9)


def test_batched_aligner_matches_single(rng):
    durs = [np.array([2, 1, 3]), np.array([1, 4])]
    align = alignment_matrix(durs, 3, 6)
    frames = np.zeros((2, 6, 2))
    frames[0] = rng.normal(size=(6, 2))
    frames[1, :5] = rng.normal(size=(5, 2))
    out = mel_align_batch(frames, align)
    np.testing.assert_allclose(out[0], mel_align(frames[0], durs[0]))
    np.testing.assert_allclose(out[1, :2], mel_align(frames[1, :5], durs[1]))
    np.testing.assert_allclose(out[1, 2], 0.0)


def test_style_modules_shapes(rng):
    enc = StyleEncoder(rng, 6, 8, 4)
    pred = StylePredictor(rng, 3, 5, 8, 4)
    for p in (1, 3, 7):
        assert enc(rng.normal(size=(2, p, 6))).shape == (2, p, 4)
        assert pred(Tensor(rng.normal(size=(2, p, 5))), [0, 2]).shape == (2, p, 4)
    with pytest.raises(KeyError):
        pred(Tensor(rng.normal(size=(1, 3, 5))), [3])
    x = rng.normal(size=(1, 4, 6))
    assert np.array_equal(enc(x).data, enc(x).data)


def test_style_loss_examples():
    a = Tensor(np.zeros((2, 3)))
    assert style_predictor_loss(a, np.zeros((2, 3))).item() == 0.0
    assert style_predictor_loss(a, np.full((2, 3), 0.5)).item() == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        style_predictor_loss(a, np.zeros((3, 2)))


def test_stop_gradient_isolates_encoder(rng):
    enc = StyleEncoder(rng, 6, 8, 4)
    pred = StylePredictor(rng, 3, 5, 8, 4)
    target = enc(rng.normal(size=(2, 4, 6)))
    loss = style_predictor_loss(pred(Tensor(rng.normal(size=(2, 4, 5))), [0, 1]), target)
    loss.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in enc.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in pred.parameters())


def test_vclub_degenerate_language_is_zero(rng):
    q = VariationalPosterior(rng, 3, 4)
    lang = np.tile(rng.normal(size=3), (10, 1))
    est = vclub_estimate(rng.normal(size=(10, 4)), lang, q)
    assert abs(est.value) < 1e-12
    assert est.batch_size == 10
    with pytest.raises(ValueError):
        vclub_estimate(rng.normal(size=(1, 4)), lang[:1], q)
    with pytest.raises(ShapeError):
        vclub_estimate(rng.normal(size=(4, 4)), lang, q)


def test_vclub_matches_loop_oracle(rng):
    q = VariationalPosterior(rng, 2, 3)
    style, lang = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
    mu, logvar = (t.data for t in q(Tensor(lang)))

    def ll(s, i):
        return float(np.sum(-0.5 * ((s - mu[i]) ** 2 / np.exp(logvar[i]) + logvar[i] + np.log(2 * np.pi))))

    pos = np.mean([ll(style[i], i) for i in range(8)])
    allp = np.mean([ll(style[j], i) for i in range(8) for j in range(8)])
    assert vclub_estimate(style, lang, q).value == pytest.approx(pos - allp, abs=1e-10)


def test_q_step_touches_only_q(rng):
    q = VariationalPosterior(rng, 2, 3)
    main = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    q_update_step(main, rng.normal(size=(8, 2)), q)
    assert main.grad is None


def test_main_step_leaves_q_gradients_zero(rng):
    q = VariationalPosterior(rng, 2, 3)
    style = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    lang = Tensor(rng.normal(size=(8, 2)), requires_grad=True)
    with q.frozen():
        est, _ = vclub(style, lang, q)
    est.backward()
    assert all(p.grad is None for p in q.parameters())
    assert np.any(style.grad) and np.any(lang.grad)
    assert all(p.requires_grad for p in q.parameters())


def test_q_loglik_trend_increases(rng):
    q = VariationalPosterior(rng, 2, 3)
    trainer = QTrainer(q, lr=5e-3)
    lang = rng.normal(size=(32, 2))
    style = lang @ rng.normal(size=(2, 3)) + 0.2 * rng.normal(size=(32, 3))
    lls = np.array([trainer.step(style, lang) for _ in range(200)])
    avg = np.convolve(lls, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(avg[::20]) >= 0)


def test_q_mean_converges_to_conditional_mean():
    rng = np.random.default_rng(5)
    q = VariationalPosterior(rng, 2, 2, hidden=16)
    trainer = QTrainer(q, lr=1e-2)
    table = np.array([[1.0, -1.0], [-1.0, 1.0]])
    means = np.array([[0.5, -0.3], [-0.8, 0.4]])
    for _ in range(800):
        ids = rng.integers(0, 2, 64)
        trainer.step(means[ids] + 0.3 * rng.normal(size=(64, 2)), table[ids])
    mu, _ = q(Tensor(table))
    np.testing.assert_allclose(mu.data, means, atol=0.05)


def test_main_optimiser_ignores_frozen_q(rng):
    q = VariationalPosterior(rng, 2, 3)
    before = [p.data.copy() for p in q.parameters()]
    style = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    opt = Adam([style], lr=0.1)
    with q.frozen():
        est, _ = vclub(style, Tensor(rng.normal(size=(8, 2))), q)
    est.backward()
    opt.step()
    for p, b in zip(q.parameters(), before):
        assert np.array_equal(p.data, b)


def test_vclub_on_two_language_channel_matches_closed_form():
    # means at +-(1, -1): cross-language pairs pay |d|^2 / (2 var) = 4 / var, half the pairs differ
    rng = np.random.default_rng(0)
    noise = 0.1
    table = np.array([[1.0, -1.0], [-1.0, 1.0]])
    q = VariationalPosterior(rng, 2, 2)
    trainer = QTrainer(q, lr=1e-2)
    for _ in range(500):
        ids = rng.integers(0, 2, 64)
        trainer.step(table[ids] + noise * rng.normal(size=(64, 2)), table[ids])
    ids = rng.integers(0, 2, 512)
    est = vclub_estimate(table[ids] + noise * rng.normal(size=(512, 2)), table[ids], q).value
    frac_cross = 2 * np.mean(ids) * (1 - np.mean(ids))
    assert est == pytest.approx(frac_cross * 4 / noise**2, rel=0.05)
