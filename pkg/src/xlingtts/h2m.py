"""Bottleneck features + speaker identity -> spectrogram frames."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import (
    Adam,
    Embedding,
    LConvBlock,
    LConvBlockConfig,
    Linear,
    Module,
    Tensor,
    l1_loss,
    no_grad,
)
from .utils import check_sequence, minibatches, pad_batch

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground-truth"
PREDICTED = "predicted"


class TeacherForcingError(RuntimeError):
    """Training was attempted on features that are not ground truth."""


@dataclass
class H2MConfig:
    bottleneck_dim: int = 64
    model_dim: int = 64
    decoder_blocks: int = 3
    mel_dim: int = 80
    num_speakers: int = 4
    speaker_embed_dim: int = 16
    kernel_size: int = 5
    num_heads: int = 4
    ff_dim: int = 128
    iterative_loss_weights: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    conditional: bool = True
    steps: int = 800
    batch_size: int = 16
    learning_rate: float = 2e-3

    def validate(self) -> None:
        if len(self.iterative_loss_weights) != self.decoder_blocks:
            raise ValueError("iterative_loss_weights must have one weight per decoder block")


class H2MNetwork(Module):
    def __init__(self, rng: np.random.Generator, cfg: H2MConfig):
        cfg.validate()
        self.speakers = Embedding(rng, cfg.num_speakers, cfg.speaker_embed_dim)
        self.inp = Linear(rng, cfg.bottleneck_dim, cfg.model_dim)
        block_cfg = LConvBlockConfig(cfg.model_dim, cfg.kernel_size, cfg.num_heads, cfg.ff_dim,
                                     conditional=cfg.conditional, condition_dim=cfg.speaker_embed_dim)
        self.blocks = [LConvBlock(rng, block_cfg) for _ in range(cfg.decoder_blocks)]
        self.out = [Linear(rng, cfg.model_dim, cfg.mel_dim) for _ in range(cfg.decoder_blocks)]
        self._cfg = cfg
        self.assign_names("h2m")

    def __call__(self, features: np.ndarray, mask: np.ndarray, speaker_ids) -> list[Tensor]:
        """Per-block predictions (normalised frame space) for a padded batch."""
        cond = self.speakers(speaker_ids) if self._cfg.conditional else None
        h = self.inp(Tensor(features))
        preds = []
        for block, proj in zip(self.blocks, self.out):
            h = block(h, mask, cond)
            preds.append(proj(h))
        return preds


def iterative_loss(preds: Sequence[Tensor], target, weights: Sequence[float], mask=None) -> tuple[Tensor, list[float]]:
    """Weighted sum of per-block L1 losses; also returns each block's value."""
    total = None
    parts = []
    for w, p in zip(weights, preds):
        term = l1_loss(p, target, mask)
        parts.append(term.item())
        total = term * w if total is None else total + term * w
    return total, parts


@dataclass
class MelPrediction:
    blocks: list[np.ndarray]

    @property
    def final(self) -> np.ndarray:
        return self.blocks[-1]


class H2MDecoder(RegressorMixin, BaseEstimator):
    """Teacher-forced decoder from bottleneck features to frames, conditioned on speaker."""

    def __init__(self, config: H2MConfig | None = None, random_state: int = 0):
        self.config = config
        self.random_state = random_state

    def _cfg(self) -> H2MConfig:
        return self.config or H2MConfig()

    def fit(self, X: Sequence[np.ndarray], y: Sequence[np.ndarray], speakers: Sequence[int],
            provenance: str = GROUND_TRUTH, log_rows: list | None = None):
        """``X``: ground-truth bottleneck features per utterance; ``y``: frames."""
        if provenance != GROUND_TRUTH:
            raise TeacherForcingError(
                f"H2M trains on ground-truth bottleneck features only (got {provenance!r})")
        cfg = self._cfg()
        X = [check_sequence(x, "features", width=cfg.bottleneck_dim) for x in X]
        y = [check_sequence(f, "frames", width=cfg.mel_dim) for f in y]
        for x, f in zip(X, y):
            if len(x) != len(f):
                raise ValueError(f"feature length {len(x)} != frame length {len(f)}")
        speakers = np.asarray(speakers, dtype=np.int64)
        allf = np.concatenate(y)
        self.frame_mean_ = allf.mean(0)
        self.frame_std_ = allf.std(0) + 1e-8
        rng = np.random.default_rng(self.random_state)
        self.network_ = H2MNetwork(rng, cfg)
        opt = Adam(self.network_.parameters(), lr=cfg.learning_rate, clip_norm=5.0)
        targets = [(f - self.frame_mean_) / self.frame_std_ for f in y]
        batches = minibatches(len(X), cfg.batch_size, rng, [len(x) for x in X])
        self.loss_history_ = []
        for step in range(cfg.steps):
            idx = next(batches)
            feats, mask = pad_batch([X[i] for i in idx])
            tgt, _ = pad_batch([targets[i] for i in idx])
            opt.zero_grad()
            loss, parts = iterative_loss(self.network_(feats, mask, speakers[idx]), tgt,
                                         cfg.iterative_loss_weights, mask)
            loss.backward()
            opt.step()
            self.loss_history_.append(loss.item())
            if log_rows is not None:
                log_rows.append({"step": step, "loss": loss.item(),
                                 **{f"block{b}": v for b, v in enumerate(parts)}})
            if step % 200 == 0:
                log.info("h2m step %d loss %.4f", step, loss.item())
        return self

    def predict_blocks(self, X: np.ndarray, speaker_id: int) -> MelPrediction:
        check_is_fitted(self, "network_")
        cfg = self._cfg()
        x = check_sequence(X, "features", width=cfg.bottleneck_dim)
        if not 0 <= speaker_id < cfg.num_speakers:
            raise KeyError(f"unknown speaker id {speaker_id}")
        with no_grad():
            preds = self.network_(x[None], np.ones((1, len(x), 1)), np.array([speaker_id]))
        return MelPrediction([p.data[0] * self.frame_std_ + self.frame_mean_ for p in preds])

    def predict(self, X: np.ndarray, speaker_id: int) -> np.ndarray:
        return self.predict_blocks(X, speaker_id).final

    def predict_many(self, X: Sequence[np.ndarray], speaker_ids: Sequence[int], batch_size: int = 32):
        check_is_fitted(self, "network_")
        out = []
        with no_grad():
            for lo in range(0, len(X), batch_size):
                chunk = X[lo : lo + batch_size]
                feats, mask = pad_batch(chunk)
                pred = self.network_(feats, mask, np.asarray(speaker_ids[lo : lo + batch_size]))[-1].data
                out.extend(pred[i, : len(c)] * self.frame_std_ + self.frame_mean_ for i, c in enumerate(chunk))
        return out

    def state(self) -> tuple[dict, dict]:
        tensors = self.network_.state_dict()
        tensors["stats.frame_mean"] = self.frame_mean_
        tensors["stats.frame_std"] = self.frame_std_
        return tensors, {"h2m": asdict(self._cfg()), "random_state": self.random_state}

    @classmethod
    def from_state(cls, tensors: dict, meta: dict) -> "H2MDecoder":
        tensors = dict(tensors)
        cfg = H2MConfig(**meta["h2m"])
        est = cls(cfg, meta.get("random_state", 0))
        est.frame_mean_ = tensors.pop("stats.frame_mean")
        est.frame_std_ = tensors.pop("stats.frame_std")
        est.network_ = H2MNetwork(np.random.default_rng(0), cfg)
        est.network_.load_state_dict(tensors)
        return est


def voice_convert(source, target_speaker: int, ssl, h2m: H2MDecoder, pitch_channel: int = -1):
    """Re-synthesise ``source`` with ``target_speaker``'s timbre.

    Returns ``(frames, source_pitch, converted_pitch)`` where the pitch
    contours are read from the sidecar channel.
    """
    feats = ssl.transform([source])[0]
    frames = h2m.predict(feats, target_speaker)
    return frames, source.frames[:, pitch_channel].copy(), frames[:, pitch_channel].copy()
