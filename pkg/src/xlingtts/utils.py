"""Batching and input-validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_sequence(x, name: str = "X", ndim: int = 2, width: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 array of the expected rank and trailing width."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if width is not None and arr.shape[-1] != width:
        raise ValueError(f"{name} must have {width} columns, got {arr.shape[-1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or inf")
    return arr


def check_durations(durations) -> np.ndarray:
    d = np.asarray(durations)
    if d.ndim != 1 or not np.all(d == np.round(d)):
        raise ValueError("durations must be a 1-D array of integers")
    d = d.astype(np.int64)
    if np.any(d <= 0):
        raise ValueError(f"durations must be positive, got min {d.min()}")
    return d


def pad_batch(seqs: Sequence[np.ndarray], fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``[T_i, ...]`` arrays into ``[B, T_max, ...]`` plus a ``[B, T_max, 1]`` mask."""
    lengths = [len(s) for s in seqs]
    t_max = max(lengths)
    first = np.asarray(seqs[0])
    out = np.full((len(seqs), t_max) + first.shape[1:], fill, dtype=first.dtype)
    mask = np.zeros((len(seqs), t_max, 1))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return out, mask


def minibatches(n: int, batch_size: int, rng: np.random.Generator, lengths: Sequence[int] | None = None):
    """Yield index batches forever; with ``lengths`` batches group similar lengths."""
    while True:
        order = rng.permutation(n)
        if lengths is not None:
            # sort within windows of 8 batches to cut padding
            window = batch_size * 8
            lengths = np.asarray(lengths)
            order = np.concatenate([
                chunk[np.argsort(lengths[chunk], kind="stable")]
                for chunk in np.array_split(order, max(1, n // window))
            ])
            batches = [order[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
            for j in rng.permutation(len(batches)):
                yield batches[j]
        else:
            for i in range(0, n - batch_size + 1, batch_size):
                yield order[i : i + batch_size]


def length_regulate(encoding: np.ndarray, durations) -> np.ndarray:
    """Repeat row ``p`` of ``encoding`` ``durations[p]`` times."""
    d = check_durations(durations)
    if len(d) != len(encoding):
        raise ValueError(f"{len(d)} durations for {len(encoding)} rows")
    return np.repeat(encoding, d, axis=0)


def upsample_index(durations_batch: Sequence[np.ndarray], t_max: int | None = None):
    """Gather indices mapping frames to phonemes for a padded batch.

    Returns ``(index [B, T_max], frame_mask [B, T_max, 1])``; padded frames
    point at phoneme 0 and are masked out.
    """
    totals = [int(np.sum(d)) for d in durations_batch]
    t_max = t_max or max(totals)
    index = np.zeros((len(durations_batch), t_max), dtype=np.int64)
    mask = np.zeros((len(durations_batch), t_max, 1))
    for i, d in enumerate(durations_batch):
        rep = np.repeat(np.arange(len(d)), d)
        index[i, : len(rep)] = rep
        mask[i, : len(rep)] = 1.0
    return index, mask


def cmvn(frames: np.ndarray, mask: np.ndarray | None = None, eps: float = 1e-5) -> np.ndarray:
    """Per-utterance, per-channel mean/variance normalisation over valid frames."""
    if mask is None:
        mu = frames.mean(axis=-2, keepdims=True)
        var = frames.var(axis=-2, keepdims=True)
        return (frames - mu) / np.sqrt(var + eps)
    count = np.maximum(mask.sum(axis=-2, keepdims=True), 1.0)
    mu = (frames * mask).sum(axis=-2, keepdims=True) / count
    var = (((frames - mu) * mask) ** 2).sum(axis=-2, keepdims=True) / count
    return (frames - mu) / np.sqrt(var + eps) * mask
