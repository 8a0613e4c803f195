"""Style adaptor: mel aligner, style encoder/predictor and the vCLUB MI penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Adam,
    ConvStack,
    Embedding,
    Linear,
    Module,
    Tensor,
    ShapeError,
    clip,
    exp,
    l1_loss,
    relu,
)
from .utils import check_durations

LOG_2PI = math.log(2.0 * math.pi)


def mel_align(frames, durations) -> np.ndarray:
    """Average the frames belonging to each phoneme: ``[T, D] -> [P, D]``."""
    frames = np.asarray(frames, dtype=np.float64)
    d = check_durations(durations)
    if d.sum() != len(frames):
        raise ValueError(f"durations sum to {d.sum()} but there are {len(frames)} frames")
    bounds = np.concatenate([[0], np.cumsum(d)])
    sums = np.add.reduceat(frames, bounds[:-1], axis=0)
    return sums / d[:, None]


def alignment_matrix(durations_batch, p_max: int, t_max: int) -> np.ndarray:
    """One-hot ``[B, T, P]`` with ``A[b, t, p] = 1`` iff frame t belongs to phoneme p."""
    a = np.zeros((len(durations_batch), t_max, p_max))
    for b, d in enumerate(durations_batch):
        rep = np.repeat(np.arange(len(d)), d)
        a[b, np.arange(len(rep)), rep] = 1.0
    return a


def mel_align_batch(frames: np.ndarray, align: np.ndarray) -> np.ndarray:
    counts = align.sum(axis=1)[..., None]  # [B, P, 1]
    return np.swapaxes(align, 1, 2) @ frames / np.maximum(counts, 1.0)


class StyleEncoder(Module):
    """Conv stack over the phoneme axis of a phoneme-level spectrogram."""

    def __init__(self, rng: np.random.Generator, mel_dim: int, hidden: int, style_dim: int,
                 num_layers: int = 3, kernel_size: int = 3):
        self.net = ConvStack(rng, mel_dim, hidden, style_dim, num_layers, kernel_size)

    def __call__(self, phoneme_spectrogram, mask=None) -> Tensor:
        return self.net(Tensor(phoneme_spectrogram) if not isinstance(phoneme_spectrogram, Tensor)
                        else phoneme_spectrogram, mask)


class StylePredictor(Module):
    """Predicts fine-grained style from phoneme encodings and a style ID."""

    def __init__(self, rng: np.random.Generator, num_styles: int, enc_dim: int, hidden: int,
                 style_dim: int, num_layers: int = 3, kernel_size: int = 3):
        self.style_table = Embedding(rng, num_styles, enc_dim)
        self.net = ConvStack(rng, enc_dim, hidden, style_dim, num_layers, kernel_size)

    def __call__(self, encoding: Tensor, style_ids, mask=None) -> Tensor:
        sid = self.style_table(style_ids)  # [B, E]
        return self.net(encoding + sid.reshape(sid.shape[0], 1, sid.shape[1]), mask)


def style_predictor_loss(predicted: Tensor, encoder_target, mask=None) -> Tensor:
    """L1 to the style encoder output with the gradient stopped at the target."""
    target = encoder_target.detach() if isinstance(encoder_target, Tensor) else Tensor(encoder_target)
    if predicted.shape != target.shape:
        raise ShapeError(f"predicted {predicted.shape} vs target {target.shape}")
    return l1_loss(predicted, target, mask)


class VariationalPosterior(Module):
    """Diagonal Gaussian q(style | language embedding)."""

    def __init__(self, rng: np.random.Generator, lang_dim: int, style_dim: int, hidden: int = 32,
                 logvar_range: tuple[float, float] = (-6.0, 2.0)):
        self.hidden = Linear(rng, lang_dim, hidden)
        self.mean = Linear(rng, hidden, style_dim)
        self.logvar = Linear(rng, hidden, style_dim, zero=True)
        self._range = logvar_range

    def __call__(self, lang: Tensor) -> tuple[Tensor, Tensor]:
        h = relu(self.hidden(lang))
        return self.mean(h), clip(self.logvar(h), *self._range)

    def log_likelihood(self, style: Tensor, lang: Tensor) -> Tensor:
        """Mean over the batch of log q(style_i | lang_i)."""
        mu, logvar = self(lang)
        diff = style - mu
        ll = (diff * diff * exp(-logvar) + logvar + LOG_2PI) * -0.5
        return ll.sum(axis=-1).mean()


@dataclass
class MIEstimate:
    value: float
    batch_size: int
    posterior_loglik: float


def vclub(style: Tensor, lang: Tensor, q: VariationalPosterior) -> tuple[Tensor, Tensor]:
    """vCLUB bound as a differentiable scalar, plus the positive-pair log-likelihood.

    estimate = mean_i log q(s_i|l_i) - mean_{i,j} log q(s_j|l_i)
    """
    b = style.shape[0]
    if b < 2:
        raise ValueError(f"vCLUB needs at least 2 paired samples, got {b}")
    mu, logvar = q(lang)  # [B, S]
    inv_var = exp(-logvar)
    s = style.reshape(1, b, style.shape[1])
    m = mu.reshape(b, 1, mu.shape[1])
    iv = inv_var.reshape(b, 1, mu.shape[1])
    lv = logvar.reshape(b, 1, mu.shape[1])
    diff = s - m  # [B_lang, B_style, S]
    pair_ll = ((diff * diff * iv + lv + LOG_2PI) * -0.5).sum(axis=-1)  # [B, B]
    eye = np.eye(b)
    positive = (pair_ll * eye).sum() * (1.0 / b)
    marginal = pair_ll.mean()
    return positive - marginal, positive


def vclub_estimate(style_batch, language_batch, q: VariationalPosterior) -> MIEstimate:
    style = np.asarray(style_batch, dtype=np.float64)
    lang = np.asarray(language_batch, dtype=np.float64)
    if style.shape[0] != lang.shape[0]:
        raise ShapeError("style and language batches must be paired row by row")
    with q.frozen():
        est, pos = vclub(Tensor(style), Tensor(lang), q)
    return MIEstimate(est.item(), style.shape[0], pos.item())


class QTrainer:
    """Owns q's optimiser; each step maximises the paired log-likelihood."""

    def __init__(self, q: VariationalPosterior, lr: float = 5e-3):
        self.q = q
        self.opt = Adam(q.parameters(), lr=lr)

    def step(self, style_batch, language_batch) -> float:
        style = Tensor(np.asarray(style_batch.data if isinstance(style_batch, Tensor) else style_batch))
        lang = Tensor(np.asarray(language_batch.data if isinstance(language_batch, Tensor) else language_batch))
        self.opt.zero_grad()
        ll = self.q.log_likelihood(style, lang)
        (-ll).backward()
        self.opt.step()
        return ll.item()


def q_update_step(style_batch, language_batch, q: VariationalPosterior,
                  trainer: QTrainer | None = None) -> tuple[VariationalPosterior, float]:
    """One ascent step on sum_i log q(style_i | lang_i); inputs are treated as constants."""
    trainer = trainer or QTrainer(q)
    ll = trainer.step(style_batch, language_batch)
    return q, ll
