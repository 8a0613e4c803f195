"""Miniature masked-prediction pretraining on iterative k-means pseudo-labels.

The encoder normalises each utterance per channel, runs a small
convolutional front-end and then a stack of LConv blocks.  Iteration one
predicts k-means clusters of globally standardised frames; each later
iteration predicts clusters of the previous encoder's middle layer.
Continuous per-layer outputs serve as bottleneck features.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import (
    Adam,
    Conv1d,
    LayerNorm,
    LConvBlock,
    LConvBlockConfig,
    Linear,
    Module,
    Parameter,
    Tensor,
    UsageError,
    cross_entropy,
    no_grad,
    relu,
)
from .corpus import ConfigError, Utterance
from .metrics import cluster_purity, confusion_counts, pnmi, probe_accuracy
from .utils import cmvn, minibatches, pad_batch

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


# -- k-means ---------------------------------------------------------------
@dataclass
class PseudoLabelSet:
    centroids: np.ndarray
    assignments: np.ndarray
    source: str
    distortions: list[float] = field(default_factory=list)

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _assign(x: np.ndarray, c: np.ndarray, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(len(x), dtype=np.int64)
    best = np.empty(len(x))
    for lo in range(0, len(x), chunk):
        d = _sq_dists(x[lo : lo + chunk], c)
        labels[lo : lo + chunk] = d.argmin(1)
        best[lo : lo + chunk] = d[np.arange(len(d)), labels[lo : lo + chunk]]
    return labels, best


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(features, k: int, max_iters: int = 50, seed: int = 0,
               source: str = "base-features") -> PseudoLabelSet:
    """Lloyd's algorithm from k-means++ seeds; distortion is mean squared distance."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got {x.shape}")
    if len(x) < k:
        raise ConfigError(f"k-means needs at least K={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels, best = _assign(x, centroids)
    distortions = [float(best.mean())]
    for _ in range(max_iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        # empty clusters keep their previous centroid
        centroids = centroids.copy()
        centroids[filled] = sums[filled] / counts[filled, None]
        new_labels, best = _assign(x, centroids)
        distortions.append(float(best.mean()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return PseudoLabelSet(centroids, labels, source, distortions)


class KMeans(ClusterMixin, BaseEstimator):
    def __init__(self, n_clusters: int = 32, max_iter: int = 50, random_state: int = 0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        result = kmeans_fit(X, self.n_clusters, self.max_iter, self.random_state)
        self.cluster_centers_ = result.centroids
        self.labels_ = result.assignments
        self.distortions_ = result.distortions
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return _assign(np.asarray(X, dtype=np.float64), self.cluster_centers_)[0]


# -- masking -------------------------------------------------------------
def span_mask(length: int, mask_prob: float, mask_span: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask: each position starts a span of ``mask_span`` with prob ``mask_prob``."""
    starts = np.flatnonzero(rng.random(length) < mask_prob)
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        mask[s : s + mask_span] = True
    return mask


def mask_frames(frames, mask_prob: float, mask_span: int, seed: int,
                mask_vector=None) -> tuple[np.ndarray, np.ndarray]:
    """Replace sampled spans with ``mask_vector`` (zeros if none); returns (frames, indices)."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    mask = span_mask(len(frames), mask_prob, mask_span, np.random.default_rng(seed))
    out = frames.copy()
    out[mask] = 0.0 if mask_vector is None else np.asarray(mask_vector)
    return out, np.flatnonzero(mask)


# -- encoder -------------------------------------------------------------
@dataclass
class SSLEncoderConfig:
    num_conv_layers: int = 2
    num_seq_layers: int = 4
    hidden_dim: int = 64
    kernel_size: int = 5
    num_heads: int = 4
    ff_dim: int = 128
    mask_prob: float = 0.08
    mask_span: int = 5
    num_clusters_per_iteration: list[int] = field(default_factory=lambda: [32, 64])
    steps_per_iteration: int = 1200
    batch_size: int = 16
    learning_rate: float = 2e-3
    kmeans_max_iters: int = 50
    kmeans_fit_frames: int = 20000
    report_cluster_sizes: list[int] = field(default_factory=lambda: [64, 128])
    report_utterances: int = 400
    bottleneck_layer: int | None = None
    min_accuracy_factor: float = 2.0

    def validate(self) -> None:
        if self.num_seq_layers < 2:
            raise ConfigError("need at least two sequence layers so a middle layer exists")
        if self.num_conv_layers < 1:
            raise ConfigError("need at least one front-end conv layer")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if not self.num_clusters_per_iteration:
            raise ConfigError("configure at least one pretraining iteration")

    @property
    def middle_layer(self) -> int:
        return self.num_seq_layers // 2


class SSLEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: SSLEncoderConfig, mel_dim: int):
        cfg.validate()
        h = cfg.hidden_dim
        dims = [mel_dim] + [h] * cfg.num_conv_layers
        self.front = [Conv1d(rng, a, b, 3) for a, b in zip(dims[:-1], dims[1:])]
        self.front_norms = [LayerNorm(h) for _ in range(cfg.num_conv_layers)]
        block_cfg = LConvBlockConfig(h, cfg.kernel_size, cfg.num_heads, cfg.ff_dim)
        self.blocks = [LConvBlock(rng, block_cfg) for _ in range(cfg.num_seq_layers)]
        self.mask_vector = Parameter(rng.normal(0.0, 0.1, size=h))
        self._cfg = cfg
        self._mel_dim = mel_dim
        self.assign_names("ssl")

    @property
    def num_layers(self) -> int:
        return len(self.blocks) + 1

    def layers(self, frames: np.ndarray, mask: np.ndarray, span: np.ndarray | None = None,
               upto: int | None = None) -> list[Tensor]:
        """Per-layer outputs for a padded batch; layer 0 is the front-end output."""
        h = Tensor(cmvn(frames, mask))
        for conv, norm in zip(self.front, self.front_norms):
            h = norm(relu(conv(h * mask)))
        outputs = [h]
        if span is not None:
            m = span[..., None].astype(np.float64)
            h = h * (1.0 - m) + self.mask_vector * m
        last = len(self.blocks) if upto is None else upto
        for block in self.blocks[:last]:
            h = block(h, mask)
            outputs.append(h)
        return outputs


@dataclass
class BottleneckFeatures:
    matrix: np.ndarray
    layer_index: int
    utterance_id: str = ""


def extract_layer(encoder: SSLEncoder, utterance: Utterance, layer_index: int) -> BottleneckFeatures:
    if not 0 <= layer_index < encoder.num_layers:
        raise UsageError(f"layer {layer_index} outside [0, {encoder.num_layers - 1}]")
    frames = utterance.frames[None]
    mask = np.ones(frames.shape[:2] + (1,))
    with no_grad():
        out = encoder.layers(frames, mask, upto=layer_index)[layer_index]
    return BottleneckFeatures(out.data[0].copy(), layer_index, utterance.uid)


def extract_layers(encoder: SSLEncoder, frames_list: Sequence[np.ndarray], layer_indices: Sequence[int],
                   batch_size: int = 32) -> dict[int, list[np.ndarray]]:
    """Batched extraction of several layers; returns layer -> per-utterance matrices."""
    result: dict[int, list[np.ndarray]] = {l: [] for l in layer_indices}
    upto = max(layer_indices)
    with no_grad():
        for lo in range(0, len(frames_list), batch_size):
            chunk = frames_list[lo : lo + batch_size]
            padded, mask = pad_batch(chunk)
            outs = encoder.layers(padded, mask, upto=upto)
            for layer in layer_indices:
                data = outs[layer].data
                result[layer].extend(data[i, : len(f)].copy() for i, f in enumerate(chunk))
    return result


# -- pretraining -----------------------------------------------------------
def base_feature_stats(utterances: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate([u.frames for u in utterances])
    return allf.mean(0), allf.std(0) + 1e-8


def _subsample(x: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if len(x) <= cap:
        return x
    idx = np.sort(np.random.default_rng(seed).choice(len(x), cap, replace=False))
    return x[idx]


def fit_labels(features_list: Sequence[np.ndarray], k: int, cfg: SSLEncoderConfig, seed: int,
               source: str) -> PseudoLabelSet:
    """k-means on a frame subsample, then assign every frame."""
    allf = np.concatenate(features_list)
    fitted = kmeans_fit(_subsample(allf, cfg.kmeans_fit_frames, seed), k, cfg.kmeans_max_iters, seed, source)
    labels, _ = _assign(allf, fitted.centroids)
    return PseudoLabelSet(fitted.centroids, labels, source, fitted.distortions)


def _split_labels(labels: np.ndarray, lengths: Sequence[int]) -> list[np.ndarray]:
    return np.split(labels, np.cumsum(lengths)[:-1])


def masked_prediction_loss(encoder: SSLEncoder, head: Linear, frames, mask, span, labels):
    outs = encoder.layers(frames, mask, span)
    logits = head(outs[-1])
    weight = span[..., None] * mask
    return cross_entropy(logits, labels, weight), logits


def masked_accuracy(encoder: SSLEncoder, head: Linear, frames_list, labels_list,
                    cfg: SSLEncoderConfig, seed: int = 12345) -> float:
    rng = np.random.default_rng(seed)
    correct = total = 0
    with no_grad():
        for lo in range(0, len(frames_list), 32):
            chunk = frames_list[lo : lo + 32]
            frames, mask = pad_batch(chunk)
            lab, _ = pad_batch(labels_list[lo : lo + 32])
            span = np.stack([np.pad(span_mask(len(f), cfg.mask_prob, cfg.mask_span, rng),
                                    (0, frames.shape[1] - len(f))) for f in chunk])
            logits = head(encoder.layers(frames, mask, span)[-1]).data
            pick = span & (mask[..., 0] > 0)
            correct += int((logits.argmax(-1)[pick] == lab[pick]).sum())
            total += int(pick.sum())
    return correct / max(total, 1)


def pretrain_iteration(frames_list: Sequence[np.ndarray], labels: PseudoLabelSet, cfg: SSLEncoderConfig,
                       seed: int = 0, val_frames: Sequence[np.ndarray] | None = None,
                       val_labels: Sequence[np.ndarray] | None = None):
    """Train a fresh encoder to predict ``labels`` at masked positions.

    Returns ``(encoder, head, history)`` where history holds per-step losses and
    the held-out masked accuracy.
    """
    lengths = [len(f) for f in frames_list]
    if sum(lengths) != len(labels.assignments):
        raise DataError(f"{len(labels.assignments)} labels for {sum(lengths)} frames")
    rng = np.random.default_rng(seed)
    encoder = SSLEncoder(rng, cfg, frames_list[0].shape[1])
    head = Linear(rng, cfg.hidden_dim, labels.num_clusters, zero=True)
    params = encoder.parameters() + head.parameters()
    opt = Adam(params, lr=cfg.learning_rate, clip_norm=5.0)
    per_utt = _split_labels(labels.assignments, lengths)
    batches = minibatches(len(frames_list), cfg.batch_size, rng, lengths)
    losses = []
    for step in range(cfg.steps_per_iteration):
        idx = next(batches)
        frames, mask = pad_batch([frames_list[i] for i in idx])
        lab, _ = pad_batch([per_utt[i] for i in idx])
        span = np.stack([np.pad(span_mask(lengths[i], cfg.mask_prob, cfg.mask_span, rng),
                                (0, frames.shape[1] - lengths[i])) for i in idx])
        if not (span & (mask[..., 0] > 0)).any():
            continue
        opt.zero_grad()
        loss, _ = masked_prediction_loss(encoder, head, frames, mask, span, lab)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("ssl step %d loss %.4f", step, losses[-1])
    history = {"loss": losses}
    if val_frames is not None and val_labels is not None:
        history["val_masked_accuracy"] = masked_accuracy(encoder, head, val_frames, val_labels, cfg)
    return encoder, head, history


@dataclass
class PretrainResult:
    encoder: SSLEncoder
    label_sets: list[PseudoLabelSet]
    histories: list[dict]
    base_mean: np.ndarray
    base_std: np.ndarray


def run_iterations(train: Sequence[Utterance], cfg: SSLEncoderConfig, seed: int = 0,
                   validation: Sequence[Utterance] | None = None) -> PretrainResult:
    cfg.validate()
    frames_list = [u.frames for u in train]
    mean, std = base_feature_stats(train)
    targets = [(f - mean) / std for f in frames_list]
    source = "base-features"
    encoder = None
    label_sets, histories = [], []
    for it, k in enumerate(cfg.num_clusters_per_iteration):
        labels = fit_labels(targets, k, cfg, seed + 101 * it, source)
        label_sets.append(labels)
        val_frames = val_labels = None
        if validation:
            val_frames = [u.frames for u in validation]
            if it == 0:
                val_targets = [(f - mean) / std for f in val_frames]
            else:
                val_targets = extract_layers(encoder, val_frames, [cfg.middle_layer])[cfg.middle_layer]
            val_labels = [_assign(t, labels.centroids)[0] for t in val_targets]
        encoder, _, hist = pretrain_iteration(frames_list, labels, cfg, seed + 7 * it, val_frames, val_labels)
        hist["num_clusters"] = k
        hist["source"] = source
        histories.append(hist)
        log.info("ssl iteration %d done: %s", it + 1, {k2: v for k2, v in hist.items() if k2 != "loss"})
        if it + 1 < len(cfg.num_clusters_per_iteration):
            source = f"layer-{cfg.middle_layer}-iteration-{it + 1}"
            targets = extract_layers(encoder, frames_list, [cfg.middle_layer])[cfg.middle_layer]
    return PretrainResult(encoder, label_sets, histories, mean, std)


# -- layer analysis --------------------------------------------------------
@dataclass
class LayerQualityReport:
    rows: list[dict]
    recommended_layer: int

    CSV_COLUMNS = ("layer", "K", "purity", "pnmi", "speaker_probe_acc", "phoneme_probe_acc")

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(str(r[c]) if c in ("layer", "K") else f"{r[c]:.6f}" for c in self.CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def layer_summary(self, layer: int) -> dict:
        rows = [r for r in self.rows if r["layer"] == layer]
        return {key: float(np.mean([r[key] for r in rows])) for key in self.CSV_COLUMNS[2:]}


def feature_quality(features_list: Sequence[np.ndarray], utterances: Sequence[Utterance],
                    cluster_sizes: Sequence[int], seed: int = 0, fit_cap: int = 20000) -> list[dict]:
    """Purity/PNMI for each K plus speaker and phoneme probe accuracies."""
    feats = np.concatenate(features_list)
    phones = np.concatenate([u.frame_phonemes() for u in utterances])
    speakers = np.concatenate([np.full(u.num_frames, u.speaker_id) for u in utterances])
    is_train = np.concatenate([np.full(u.num_frames, i % 2 == 0) for i, u in enumerate(utterances)])
    spk = probe_accuracy(feats, speakers, is_train)
    pho = probe_accuracy(feats, phones, is_train)
    rows = []
    for k in cluster_sizes:
        fitted = kmeans_fit(_subsample(feats, fit_cap, seed), k, 50, seed)
        assign, _ = _assign(feats, fitted.centroids)
        counts = confusion_counts(assign, phones)
        rows.append({"K": k, "purity": cluster_purity(counts), "pnmi": pnmi(counts),
                     "speaker_probe_acc": spk.accuracy, "phoneme_probe_acc": pho.accuracy,
                     "speaker_chance": spk.chance})
    return rows


def layer_quality_report(encoder: SSLEncoder, utterances: Sequence[Utterance],
                         cluster_sizes: Sequence[int], seed: int = 0) -> LayerQualityReport:
    layers = list(range(encoder.num_layers))
    feats = extract_layers(encoder, [u.frames for u in utterances], layers)
    rows = []
    for layer in layers:
        for row in feature_quality(feats[layer], utterances, cluster_sizes, seed):
            rows.append({"layer": layer, **row})
    mean_pnmi = {l: np.mean([r["pnmi"] for r in rows if r["layer"] == l]) for l in layers}
    best = max(layers, key=lambda l: (mean_pnmi[l], -l))
    return LayerQualityReport(rows, best)


class SSLPretrainer(TransformerMixin, BaseEstimator):
    """Fit: iterative pseudo-label pretraining.  Transform: bottleneck features."""

    def __init__(self, config: SSLEncoderConfig | None = None, random_state: int = 0):
        self.config = config
        self.random_state = random_state

    def _cfg(self) -> SSLEncoderConfig:
        return self.config or SSLEncoderConfig()

    def fit(self, X: Sequence[Utterance], y=None, validation: Sequence[Utterance] | None = None):
        cfg = self._cfg()
        result = run_iterations(X, cfg, self.random_state, validation)
        self.encoder_ = result.encoder
        self.label_sets_ = result.label_sets
        self.histories_ = result.histories
        if cfg.bottleneck_layer is None:
            sample = list(X)[: cfg.report_utterances]
            self.quality_report_ = layer_quality_report(self.encoder_, sample, cfg.report_cluster_sizes,
                                                        self.random_state)
            self.layer_ = self.quality_report_.recommended_layer
        else:
            self.quality_report_ = None
            self.layer_ = cfg.bottleneck_layer
        return self

    def transform(self, X: Sequence[Utterance]) -> list[np.ndarray]:
        check_is_fitted(self, "encoder_")
        return extract_layers(self.encoder_, [u.frames for u in X], [self.layer_])[self.layer_]

    def state(self) -> tuple[dict, dict]:
        cfg = asdict(self._cfg())
        return self.encoder_.state_dict(), {"ssl": cfg, "layer": self.layer_,
                                           "mel_dim": self.encoder_._mel_dim}

    @classmethod
    def from_state(cls, tensors: dict, meta: dict) -> "SSLPretrainer":
        cfg = SSLEncoderConfig(**meta["ssl"])
        est = cls(cfg)
        est.encoder_ = SSLEncoder(np.random.default_rng(0), cfg, meta["mel_dim"])
        est.encoder_.load_state_dict(tensors)
        est.layer_ = meta["layer"]
        est.label_sets_, est.histories_, est.quality_report_ = [], [], None
        return est
