"""Phoneme sequence -> bottleneck features, with the cross-lingual style adaptor."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import (
    Adam,
    ConvStack,
    Embedding,
    LConvBlock,
    LConvBlockConfig,
    Linear,
    Module,
    ShapeError,
    Tensor,
    concat,
    l1_loss,
    matmul,
    mse_loss,
    no_grad,
)
from .corpus import Utterance
from .style import (
    QTrainer,
    StyleEncoder,
    StylePredictor,
    VariationalPosterior,
    alignment_matrix,
    mel_align_batch,
    style_predictor_loss,
    vclub,
)
from .utils import check_sequence, minibatches, pad_batch

log = logging.getLogger(__name__)

LOSS_TERMS = ("total", "feature", "duration", "pitch", "energy", "style", "mi", "q_loglik")


@dataclass
class P2HConfig:
    phoneme_vocab_size: int = 38
    num_languages: int = 2
    num_styles: int = 3
    mel_dim: int = 80
    embed_dim: int = 48
    style_dim: int = 16
    lang_dim: int = 8
    encoder_blocks: int = 2
    decoder_blocks: int = 3
    bottleneck_dim: int = 64
    predictor_hidden: int = 48
    style_hidden: int = 32
    kernel_size: int = 5
    num_heads: int = 4
    ff_dim: int = 96
    iterative_loss_weights: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    lambda_duration: float = 1.0
    lambda_pitch: float = 1.0
    lambda_energy: float = 1.0
    lambda_style: float = 1.0
    lambda_mi: float = 0.1
    mi_enabled: bool = True
    adaptor_enabled: bool = True
    q_steps_per_main: int = 5
    q_learning_rate: float = 5e-3
    language_conditioning: str = "encoder"  # or "mi-only"
    mi_pooling: str = "utterance"  # or "phoneme"
    mi_max_pairs: int = 64
    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 2e-3

    def validate(self) -> None:
        if len(self.iterative_loss_weights) != self.decoder_blocks:
            raise ValueError("decoder_blocks must equal len(iterative_loss_weights)")
        if self.language_conditioning not in ("encoder", "mi-only"):
            raise ValueError(f"unknown language_conditioning {self.language_conditioning!r}")
        if self.mi_pooling not in ("utterance", "phoneme"):
            raise ValueError(f"unknown mi_pooling {self.mi_pooling!r}")
        if self.batch_size < 8 and self.mi_enabled:
            raise ValueError("the MI estimate needs batches of at least 8 utterances")

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim + self.style_dim


@dataclass
class VariancePrediction:
    log_durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray

    def durations(self) -> np.ndarray:
        return decode_durations(self.log_durations)


def decode_durations(log_durations) -> np.ndarray:
    return np.maximum(1, np.round(np.exp(np.asarray(log_durations)))).astype(np.int64)


class P2HNetwork(Module):
    def __init__(self, rng: np.random.Generator, cfg: P2HConfig):
        cfg.validate()
        e, s, h = cfg.embed_dim, cfg.style_dim, cfg.hidden_dim
        self.phonemes = Embedding(rng, cfg.phoneme_vocab_size, e)
        self.languages = Embedding(rng, cfg.num_languages, cfg.lang_dim, scale=1.0)
        self.lang_proj = Linear(rng, cfg.lang_dim, e)
        enc_cfg = LConvBlockConfig(e, cfg.kernel_size, cfg.num_heads, cfg.ff_dim)
        self.encoder = [LConvBlock(rng, enc_cfg) for _ in range(cfg.encoder_blocks)]
        self.style_encoder = StyleEncoder(rng, cfg.mel_dim, cfg.style_hidden, s)
        self.style_predictor = StylePredictor(rng, cfg.num_styles, e, cfg.style_hidden, s)
        self.duration_predictor = ConvStack(rng, h, cfg.predictor_hidden, 1)
        self.pitch_predictor = ConvStack(rng, h, cfg.predictor_hidden, 1)
        self.energy_predictor = ConvStack(rng, h, cfg.predictor_hidden, 1)
        self.variance_embed = Linear(rng, 2, h)
        dec_cfg = LConvBlockConfig(h, cfg.kernel_size, cfg.num_heads, cfg.ff_dim)
        self.decoder = [LConvBlock(rng, dec_cfg) for _ in range(cfg.decoder_blocks)]
        self.heads = [Linear(rng, h, cfg.bottleneck_dim) for _ in range(cfg.decoder_blocks)]
        self._cfg = cfg
        self.assign_names("p2h")

    def language_embedding(self, language_ids) -> Tensor:
        return self.languages(language_ids)

    def encode_phonemes(self, phoneme_ids: np.ndarray, language_ids, mask: np.ndarray) -> Tensor:
        x = self.phonemes(phoneme_ids)
        if self._cfg.language_conditioning == "encoder":
            lang = self.lang_proj(self.language_embedding(language_ids))
            x = x + lang.reshape(lang.shape[0], 1, lang.shape[1])
        for block in self.encoder:
            x = block(x, mask)
        return x

    def predict_variances(self, hidden: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        squeeze = lambda t: t.reshape(t.shape[:-1])
        return (squeeze(self.duration_predictor(hidden, mask)),
                squeeze(self.pitch_predictor(hidden, mask)),
                squeeze(self.energy_predictor(hidden, mask)))

    def decode(self, hidden: Tensor, align: np.ndarray, pitch, energy, frame_mask: np.ndarray) -> list[Tensor]:
        """Length-regulate phoneme states, add variance embeddings, run decoder blocks."""
        up = matmul(Tensor(align), hidden)
        pe = concat([pitch.reshape(pitch.shape + (1,)), energy.reshape(energy.shape + (1,))], axis=-1)
        x = up + self.variance_embed(matmul(Tensor(align), pe))
        preds = []
        for block, head in zip(self.decoder, self.heads):
            x = block(x, frame_mask)
            preds.append(head(x))
        return preds


def mi_pairs(style: Tensor, phoneme_mask: np.ndarray, languages: np.ndarray, pooling: str,
             max_pairs: int = 64) -> tuple[Tensor, np.ndarray]:
    """Paired (style row, language id) samples for the MI estimate.

    ``utterance`` pools the masked style sequence to its mean; ``phoneme`` keeps
    every valid phoneme, thinned to at most ``max_pairs`` evenly spaced rows.
    """
    if pooling == "utterance":
        return style.sum(axis=1) / phoneme_mask.sum(axis=1), np.asarray(languages)
    b, p, s = style.shape
    flat = np.flatnonzero(phoneme_mask[..., 0].reshape(-1) > 0)
    if len(flat) > max_pairs:
        flat = flat[np.linspace(0, len(flat) - 1, max_pairs).round().astype(int)]
    return style.reshape(b * p, s)[flat], np.asarray(languages)[flat // p]


@dataclass
class Batch:
    phonemes: np.ndarray  # [B, P]
    phoneme_mask: np.ndarray  # [B, P, 1]
    languages: np.ndarray
    styles: np.ndarray
    durations: list[np.ndarray]
    log_durations: np.ndarray  # [B, P]
    pitch: np.ndarray
    energy: np.ndarray
    align: np.ndarray  # [B, T, P]
    frame_mask: np.ndarray  # [B, T, 1]
    phoneme_spectrogram: np.ndarray | None  # [B, P, mel]
    targets: np.ndarray | None  # [B, T, bottleneck]


def make_batch(utts: Sequence[Utterance], targets: Sequence[np.ndarray] | None,
               frame_mean: np.ndarray, frame_std: np.ndarray) -> Batch:
    phonemes, pmask = pad_batch([u.phonemes for u in utts])
    durs = [u.durations for u in utts]
    logd, _ = pad_batch([np.log(u.durations.astype(np.float64)) for u in utts])
    pitch, _ = pad_batch([u.pitch for u in utts])
    energy, _ = pad_batch([u.energy for u in utts])
    frames, fmask = pad_batch([(u.frames - frame_mean) / frame_std for u in utts])
    align = alignment_matrix(durs, phonemes.shape[1], frames.shape[1])
    tgt = pad_batch(list(targets))[0] if targets is not None else None
    return Batch(phonemes, pmask, np.array([u.language_id for u in utts]), np.array([u.style_id for u in utts]),
                 durs, logd, pitch, energy, align, fmask, mel_align_batch(frames, align), tgt)


def p2h_loss(preds: Sequence[Tensor], targets, variances, var_targets, weights: Sequence[float],
             lambdas: tuple[float, float, float], frame_mask=None, phoneme_mask=None) -> tuple[Tensor, dict]:
    """Iterative feature L1 plus weighted duration/pitch/energy MSE; returns (total, breakdown)."""
    feat = None
    for w, p in zip(weights, preds):
        term = l1_loss(p, targets, frame_mask) * w
        feat = term if feat is None else feat + term
    pm = None if phoneme_mask is None else phoneme_mask[..., 0]
    parts = {"feature": feat}
    for name, pred, target, lam in zip(("duration", "pitch", "energy"), variances, var_targets, lambdas):
        parts[name] = mse_loss(pred, target, pm) * lam
    total = parts["feature"] + parts["duration"] + parts["pitch"] + parts["energy"]
    return total, parts


class P2HModel(BaseEstimator):
    """Fit on (utterances, bottleneck targets); predict bottleneck features from text."""

    def __init__(self, config: P2HConfig | None = None, random_state: int = 0):
        self.config = config
        self.random_state = random_state

    def _cfg(self) -> P2HConfig:
        return self.config or P2HConfig()

    # -- training ----------------------------------------------------------
    def _forward_train(self, batch: Batch, q: VariationalPosterior | None):
        cfg = self._cfg()
        net = self.network_
        pmask = batch.phoneme_mask
        enc = net.encode_phonemes(batch.phonemes, batch.languages, pmask)
        extras = {}
        if cfg.adaptor_enabled:
            style = net.style_encoder(batch.phoneme_spectrogram, pmask) * pmask
            predicted = net.style_predictor(enc, batch.styles, pmask)
            extras["style"] = style_predictor_loss(predicted, style, pmask) * cfg.lambda_style
            if cfg.mi_enabled and q is not None:
                rows, lang = mi_pairs(style, pmask, batch.languages, cfg.mi_pooling, cfg.mi_max_pairs)
                with q.frozen():
                    mi, _ = vclub(rows, net.language_embedding(lang), q)
                extras["mi"] = mi * cfg.lambda_mi
                extras["mi_estimate"] = mi.item()
        else:
            style = Tensor(np.zeros(enc.shape[:2] + (cfg.style_dim,)))
        hidden = concat([enc, style], axis=-1)
        logd, pitch, energy = net.predict_variances(hidden, pmask)
        preds = net.decode(hidden, batch.align, Tensor(batch.pitch), Tensor(batch.energy), batch.frame_mask)
        total, parts = p2h_loss(preds, batch.targets, (logd, pitch, energy),
                                (batch.log_durations, batch.pitch, batch.energy),
                                cfg.iterative_loss_weights,
                                (cfg.lambda_duration, cfg.lambda_pitch, cfg.lambda_energy),
                                batch.frame_mask, pmask)
        for key in ("style", "mi"):
            if key in extras:
                parts[key] = extras[key]
                total = total + extras[key]
        return total, parts, extras

    def fit(self, X: Sequence[Utterance], y: Sequence[np.ndarray], log_rows: list | None = None):
        """``y`` holds the bottleneck features extracted from each utterance's frames."""
        cfg = self._cfg()
        X = list(X)
        y = [check_sequence(t, "targets", width=cfg.bottleneck_dim) for t in y]
        for u, t in zip(X, y):
            if len(t) != u.num_frames:
                raise ShapeError(f"{u.uid}: {len(t)} target frames for {u.num_frames} frames")
        allf = np.concatenate([u.frames for u in X])
        self.frame_mean_, self.frame_std_ = allf.mean(0), allf.std(0) + 1e-8
        rng = np.random.default_rng(self.random_state)
        self.network_ = P2HNetwork(rng, cfg)
        self.q_ = VariationalPosterior(rng, cfg.lang_dim, cfg.style_dim) if cfg.mi_enabled else None
        opt = Adam(self.network_.parameters(), lr=cfg.learning_rate, clip_norm=5.0)
        qtrain = QTrainer(self.q_, cfg.q_learning_rate) if self.q_ is not None else None
        batches = minibatches(len(X), cfg.batch_size, rng, [u.num_frames for u in X])
        self.loss_history_ = []
        for step in range(cfg.steps):
            idx = next(batches)
            batch = make_batch([X[i] for i in idx], [y[i] for i in idx], self.frame_mean_, self.frame_std_)
            q_ll = float("nan")
            if qtrain is not None and cfg.adaptor_enabled:
                with no_grad():
                    style = self.network_.style_encoder(batch.phoneme_spectrogram, batch.phoneme_mask)
                    rows, lang = mi_pairs(style * batch.phoneme_mask, batch.phoneme_mask, batch.languages,
                                          cfg.mi_pooling, cfg.mi_max_pairs)
                    lang = self.network_.language_embedding(lang)
                for _ in range(cfg.q_steps_per_main):
                    q_ll = qtrain.step(rows.data, lang.data)
            opt.zero_grad()
            total, parts, extras = self._forward_train(batch, self.q_)
            total.backward()
            opt.step()
            row = {"step": step, "total": total.item(), "q_loglik": q_ll,
                   "mi_estimate": extras.get("mi_estimate", float("nan"))}
            row.update({k: v.item() for k, v in parts.items()})
            self.loss_history_.append(row)
            if log_rows is not None:
                log_rows.append(row)
            if step % 250 == 0:
                log.info("p2h step %d %s", step, {k: round(v, 4) for k, v in row.items() if k != "step"})
        return self

    # -- inference ---------------------------------------------------------
    def _infer(self, phonemes: Sequence[np.ndarray], languages, styles, durations=None,
               reference: Sequence[np.ndarray] | None = None):
        check_is_fitted(self, "network_")
        cfg = self._cfg()
        net = self.network_
        for p in phonemes:
            if np.any((p < 0) | (p >= cfg.phoneme_vocab_size)):
                raise KeyError(f"phoneme id outside vocabulary of size {cfg.phoneme_vocab_size}")
        styles = np.asarray(styles)
        if np.any((styles < 0) | (styles >= cfg.num_styles)):
            raise KeyError("unknown style id")
        with no_grad():
            ph, pmask = pad_batch(list(phonemes))
            enc = net.encode_phonemes(ph, np.asarray(languages), pmask)
            if not cfg.adaptor_enabled:
                style = np.zeros(enc.shape[:2] + (cfg.style_dim,))
            elif reference is not None:
                frames, fmask = pad_batch([(f - self.frame_mean_) / self.frame_std_ for f in reference])
                align = alignment_matrix(durations, ph.shape[1], frames.shape[1])
                style = net.style_encoder(mel_align_batch(frames, align), pmask).data * pmask
            else:
                style = net.style_predictor(enc, styles, pmask).data * pmask
            hidden = concat([enc, Tensor(style)], axis=-1)
            logd, pitch, energy = (t.data for t in net.predict_variances(hidden, pmask))
            if durations is None:
                durations = [decode_durations(logd[i, : len(p)]) for i, p in enumerate(phonemes)]
            t_max = max(int(np.sum(d)) for d in durations)
            align = alignment_matrix(durations, ph.shape[1], t_max)
            fmask = align.sum(-1, keepdims=True)
            preds = net.decode(hidden, align, Tensor(pitch), Tensor(energy), fmask)
        out = []
        for i, p in enumerate(phonemes):
            n, t = len(p), int(np.sum(durations[i]))
            out.append({
                "blocks": [pr.data[i, :t] for pr in preds],
                "features": preds[-1].data[i, :t],
                "durations": np.asarray(durations[i]),
                "variances": VariancePrediction(logd[i, :n], pitch[i, :n], energy[i, :n]),
                "style": style[i, :n],
            })
        return out

    def predict(self, phonemes: Sequence[np.ndarray], languages, styles, durations=None,
                batch_size: int = 32) -> list[dict]:
        """Bottleneck features for each phoneme sequence.

        With ``durations`` the length regulator uses them (ground truth);
        otherwise predicted durations are decoded with max(1, round(exp(.))).
        """
        results = []
        for lo in range(0, len(phonemes), batch_size):
            sl = slice(lo, lo + batch_size)
            results.extend(self._infer(phonemes[sl], np.asarray(languages)[sl], np.asarray(styles)[sl],
                                       None if durations is None else durations[sl]))
        return results

    def style_embeddings(self, utterances: Sequence[Utterance], source: str = "encoder") -> list[np.ndarray]:
        """Phoneme-level style embeddings from the style encoder (reference frames) or predictor."""
        check_is_fitted(self, "network_")
        cfg = self._cfg()
        out = []
        for lo in range(0, len(utterances), 32):
            chunk = utterances[lo : lo + 32]
            if not cfg.adaptor_enabled:
                out.extend(np.zeros((u.num_phonemes, cfg.style_dim)) for u in chunk)
                continue
            with no_grad():
                ph, pmask = pad_batch([u.phonemes for u in chunk])
                if source == "encoder":
                    frames, _ = pad_batch([(u.frames - self.frame_mean_) / self.frame_std_ for u in chunk])
                    align = alignment_matrix([u.durations for u in chunk], ph.shape[1], frames.shape[1])
                    style = self.network_.style_encoder(mel_align_batch(frames, align), pmask).data
                else:
                    enc = self.network_.encode_phonemes(ph, np.array([u.language_id for u in chunk]), pmask)
                    style = self.network_.style_predictor(enc, np.array([u.style_id for u in chunk]), pmask).data
            out.extend(style[i, : u.num_phonemes] for i, u in enumerate(chunk))
        return out

    def state(self) -> tuple[dict, dict]:
        tensors = self.network_.state_dict()
        if self.q_ is not None:
            tensors.update({f"q.{k}": v for k, v in self.q_.state_dict().items()})
        tensors["stats.frame_mean"] = self.frame_mean_
        tensors["stats.frame_std"] = self.frame_std_
        return tensors, {"p2h": asdict(self._cfg()), "random_state": self.random_state}

    @classmethod
    def from_state(cls, tensors: dict, meta: dict) -> "P2HModel":
        tensors = dict(tensors)
        cfg = P2HConfig(**meta["p2h"])
        est = cls(cfg, meta.get("random_state", 0))
        est.frame_mean_ = tensors.pop("stats.frame_mean")
        est.frame_std_ = tensors.pop("stats.frame_std")
        rng = np.random.default_rng(0)
        est.network_ = P2HNetwork(rng, cfg)
        q_state = {k[2:]: tensors.pop(k) for k in list(tensors) if k.startswith("q.")}
        est.network_.load_state_dict(tensors)
        est.q_ = None
        if q_state:
            est.q_ = VariationalPosterior(rng, cfg.lang_dim, cfg.style_dim)
            est.q_.load_state_dict(q_state)
        return est
