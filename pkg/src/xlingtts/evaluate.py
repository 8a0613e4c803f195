"""Objective evaluation of trained systems: PER, style-contour correlation, language probe."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .corpus import CorpusConfig, Utterance, allowed_in_training
from .h2m import H2MDecoder
from .metrics import MetricError, phoneme_error_rate, pitch_contour_correlation, probe_accuracy
from .p2h import P2HModel
from .utils import check_durations, cmvn

WITHIN = "W"
CROSS = "C"
SYSTEM_METRICS = ("per", "style_corr", "language_probe")


def segment_vote(frame_labels, durations) -> np.ndarray:
    """Majority label inside each duration segment (ties go to the smallest label)."""
    labels = np.asarray(frame_labels)
    d = check_durations(durations)
    if d.sum() != len(labels):
        raise ValueError(f"durations cover {d.sum()} frames, got {len(labels)} labels")
    out = np.empty(len(d), dtype=labels.dtype)
    start = 0
    for i, n in enumerate(d):
        values, counts = np.unique(labels[start : start + n], return_counts=True)
        out[i] = values[np.argmax(counts)]
        start += n
    return out


class PhonemeRecognizer(ClassifierMixin, BaseEstimator):
    """Frame-level phoneme classifier on per-utterance normalised frames.

    Sequences are decoded by majority vote inside each duration segment.
    """

    def __init__(self, C: float = 1.0, max_iter: int = 300, max_frames: int = 30000, random_state: int = 0,
                 exclude_channels: tuple[int, ...] = (-1,)):
        self.C = C
        self.max_iter = max_iter
        self.max_frames = max_frames
        self.random_state = random_state
        self.exclude_channels = exclude_channels

    def _features(self, frames: np.ndarray) -> np.ndarray:
        x = cmvn(np.asarray(frames, dtype=np.float64))
        keep = np.ones(x.shape[1], dtype=bool)
        keep[list(self.exclude_channels)] = False
        return x[:, keep]

    def fit(self, X: Sequence[Utterance], y=None):
        feats = np.concatenate([self._features(u.frames) for u in X])
        labels = np.concatenate([u.frame_phonemes() for u in X])
        if len(feats) > self.max_frames:
            idx = np.random.default_rng(self.random_state).choice(len(feats), self.max_frames, replace=False)
            feats, labels = feats[np.sort(idx)], labels[np.sort(idx)]
        self.model_ = LogisticRegression(C=self.C, max_iter=self.max_iter).fit(feats, labels)
        self.classes_ = self.model_.classes_
        return self

    def predict(self, frames) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict(self._features(frames))

    def recognize(self, frames, durations) -> np.ndarray:
        return segment_vote(self.predict(frames), durations)


@dataclass(frozen=True)
class SynthesisRequest:
    phonemes: np.ndarray
    language_id: int
    speaker_id: int
    style_id: int
    source_uid: str
    cross_lingual: bool


@dataclass
class Synthesis:
    request: SynthesisRequest
    frames: np.ndarray
    durations: np.ndarray
    features: np.ndarray

    @property
    def tag(self) -> str:
        return "cross-lingual" if self.request.cross_lingual else "within-lingual"


def is_cross_lingual(cfg: CorpusConfig, language_id: int, speaker_id: int, style_id: int) -> bool:
    return not allowed_in_training(cfg, language_id, speaker_id, style_id)


def build_requests(test: Sequence[Utterance], cfg: CorpusConfig, per_group: int = 40) -> dict[str, list[SynthesisRequest]]:
    """Within-lingual requests replay seen (language, speaker, style) triples.

    Cross-lingual requests put language-0 texts on the held-out speaker and style.
    """
    within = [u for u in test if allowed_in_training(cfg, u.language_id, u.speaker_id, u.style_id)]
    texts_a = [u for u in test if u.language_id == 0]
    w = [SynthesisRequest(u.phonemes, u.language_id, u.speaker_id, u.style_id, u.uid, False)
         for u in within[:per_group]]
    spk, sty = cfg.heldout_speaker, cfg.heldout_style
    c = [SynthesisRequest(u.phonemes, 0, spk, sty, u.uid, is_cross_lingual(cfg, 0, spk, sty))
         for u in texts_a[:per_group]]
    return {WITHIN: w, CROSS: c}


def synthesize(requests: Sequence[SynthesisRequest], p2h: P2HModel, h2m: H2MDecoder) -> list[Synthesis]:
    if not requests:
        return []
    out = p2h.predict([r.phonemes for r in requests], [r.language_id for r in requests],
                      [r.style_id for r in requests])
    frames = h2m.predict_many([o["features"] for o in out], [r.speaker_id for r in requests])
    return [Synthesis(r, f, o["durations"], o["features"]) for r, f, o in zip(requests, frames, out)]


def style_references(utterances: Sequence[Utterance], style_id: int, language_id: int, limit: int = 20):
    return [u for u in utterances if u.style_id == style_id and u.language_id == language_id][:limit]


def style_contour_score(synth: Synthesis, references: Sequence[Utterance], pitch_channel: int = -1) -> float:
    """Mean pitch-contour correlation between a synthesis and same-style references."""
    if not references:
        raise MetricError("no style references available")
    contour = synth.frames[:, pitch_channel]
    scores = []
    for ref in references:
        try:
            scores.append(pitch_contour_correlation(contour, ref.frames[:, pitch_channel]))
        except MetricError:
            scores.append(0.0)
    return float(np.mean(scores))


def language_probe(p2h: P2HModel, utterances: Sequence[Utterance]) -> float:
    """Held-out accuracy of a linear probe predicting language from utterance-mean style embeddings."""
    emb = np.stack([e.mean(axis=0) for e in p2h.style_embeddings(list(utterances), source="encoder")])
    labels = np.array([u.language_id for u in utterances])
    train = np.arange(len(utterances)) % 2 == 0
    if np.allclose(emb, emb[0]):
        # constant features carry no information; the probe can only guess the majority class
        held = labels[~train]
        return float(np.mean(held == np.bincount(labels[train]).argmax()))
    return probe_accuracy(emb, labels, train).accuracy


@dataclass
class SystemEvaluation:
    name: str
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    syntheses: dict[str, list[Synthesis]] = field(default_factory=dict)

    def row(self) -> dict[str, float | str]:
        row: dict[str, float | str] = {"system": self.name}
        for metric in SYSTEM_METRICS:
            for split in (WITHIN, CROSS):
                row[f"{metric}_{split}"] = self.metrics[metric][split]
        return row


def evaluate_system(name: str, p2h: P2HModel, h2m: H2MDecoder, recognizer: PhonemeRecognizer,
                    corpus_cfg: CorpusConfig, test: Sequence[Utterance], references: Sequence[Utterance],
                    per_group: int = 40, reference_limit: int = 20, workers: int = 1) -> SystemEvaluation:
    """PER, style-contour correlation and language-probe accuracy, split into W and C.

    Cross-lingual style references come from the other language (1), where the held-out
    speaker and style were recorded.
    """
    requests = build_requests(test, corpus_cfg, per_group)
    result = SystemEvaluation(name)
    per, corr = {}, {}
    for split, reqs in requests.items():
        synth = synthesize(reqs, p2h, h2m)
        result.syntheses[split] = synth
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hyps = list(pool.map(lambda s: recognizer.recognize(s.frames, s.durations), synth))
        per[split] = float(np.mean([phoneme_error_rate(h, s.request.phonemes) for h, s in zip(hyps, synth)]))
        scores = []
        for s in synth:
            ref_lang = 1 if split == CROSS else s.request.language_id
            refs = style_references(references, s.request.style_id, ref_lang, reference_limit)
            scores.append(style_contour_score(s, refs))
        corr[split] = float(np.mean(scores))
    seen = [u for u in test if allowed_in_training(corpus_cfg, u.language_id, u.speaker_id, u.style_id)]
    unseen = [u for u in test if u.speaker_id == corpus_cfg.heldout_speaker or u.style_id == corpus_cfg.heldout_style]
    result.metrics = {
        "per": per,
        "style_corr": corr,
        "language_probe": {WITHIN: language_probe(p2h, seen), CROSS: language_probe(p2h, unseen)},
    }
    return result


def comparison_csv(evaluations: Sequence[SystemEvaluation]) -> str:
    header = ["system"] + [f"{m}_{s}" for m in SYSTEM_METRICS for s in (WITHIN, CROSS)]
    lines = [",".join(header)]
    for ev in evaluations:
        row = ev.row()
        lines.append(",".join([str(row["system"])] + [f"{row[h]:.6f}" for h in header[1:]]))
    return "\n".join(lines) + "\n"
