"""Synthetic bilingual corpus with recorded latent factors.

Each utterance is generated from four independent factors: the text
(phonemes of one of two pseudo-languages), the speaker (an invertible
affine frame transform), the style (pitch contour family, duration
scaling, energy envelope) and the language's own prosody rule (final
lengthening and pitch declination).  The last frame channel is a pitch
sidecar that carries the pitch contour untouched by timbre.

Shard layout (little-endian, one record after another)::

    int64[8]  utt_index, language_id, speaker_id, style_id,
              num_phonemes P, num_frames T, mel_dim D, seed
    int64[P]  phoneme ids
    int64[P]  durations (frames)
    float64[P] pitch
    float64[P] energy
    float64[T*D] frames, row-major

Manifest: tab-separated text, one header line then one row per utterance
with columns ``id split language_id speaker_id style_id num_phonemes
num_frames shard offset`` (``offset`` is the record's byte offset).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "validation", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
MANIFEST_COLUMNS = ("id", "split", "language_id", "speaker_id", "style_id",
                    "num_phonemes", "num_frames", "shard", "offset")
_RECORD_HEAD = 8


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    seed: int = 0
    mel_dim: int = 80
    lang_a_phonemes: int = 20
    lang_b_phonemes: int = 24
    shared_phonemes: int = 6
    num_speakers: int = 4
    num_styles: int = 3
    length_range: tuple[int, int] = (6, 16)
    base_duration_range: tuple[int, int] = (3, 6)
    noise_sigma: float = 0.3
    pitch_track_noise: float = 0.02
    pitch_gain: float = 2.0
    energy_gain: float = 0.3
    timbre_scale_range: tuple[float, float] = (0.5, 2.0)
    timbre_bias_sigma: float = 1.2
    timbre_rotation: float = 0.05
    min_timbre_distance: float = 2.0
    # language prosody rules: [A, B]
    final_lengthening: tuple[float, float] = (1.0, 1.5)
    declination: tuple[float, float] = (-0.6, 0.4)
    heldout_speaker: int = 0
    heldout_style: int = 0
    # "pair": only the (speaker*, style*) pair is absent from language A in
    # training; "factors": speaker* and style* are each absent from language A.
    heldout_scope: str = "factors"
    n_train: int = 2000
    n_validation: int = 200
    n_test: int = 200
    shard_size: int = 500

    def validate(self) -> None:
        if min(self.lang_a_phonemes, self.lang_b_phonemes) < 4:
            raise ConfigError("each language needs an inventory of at least 4 phonemes")
        if self.shared_phonemes >= min(self.lang_a_phonemes, self.lang_b_phonemes) / 2:
            raise ConfigError("shared phonemes must be a minority of each inventory")
        if self.num_speakers < 3 or self.num_styles < 2:
            raise ConfigError("need at least 3 speakers and 2 styles")
        lo, hi = self.length_range
        if not 3 <= lo <= hi <= 40:
            raise ConfigError(f"length_range {self.length_range} must lie within [3, 40]")
        if self.heldout_scope not in ("pair", "factors"):
            raise ConfigError(f"unknown heldout_scope {self.heldout_scope!r}")
        if not (0 <= self.heldout_speaker < self.num_speakers and 0 <= self.heldout_style < self.num_styles):
            raise ConfigError("held-out speaker/style out of range")

    @property
    def vocab_size(self) -> int:
        return self.lang_a_phonemes + self.lang_b_phonemes - self.shared_phonemes

    @property
    def pitch_channel(self) -> int:
        return self.mel_dim - 1


@dataclass
class LanguageSpec:
    language_id: int
    phonemes: np.ndarray  # inventory ids
    final_lengthening: float
    declination: float


@dataclass
class SpeakerSpec:
    speaker_id: int
    scale: np.ndarray  # [mel_dim]
    rotation: np.ndarray  # [mel_dim, mel_dim], identity on the pitch sidecar
    bias: np.ndarray  # [mel_dim]
    gender: str = "F"

    def matrix(self) -> np.ndarray:
        """Linear part of the transform: frames @ matrix().T + bias."""
        return self.rotation * self.scale[None, :]

    def apply(self, z: np.ndarray) -> np.ndarray:
        return (z * self.scale) @ self.rotation.T + self.bias

    def invert(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.bias) @ self.rotation) / self.scale


@dataclass
class StyleSpec:
    style_id: int
    pitch_base: float
    pitch_range: float
    periodicity: float
    phase: float
    duration_multiplier: tuple[float, float]  # by phoneme class (id % 2)
    energy_slope: float
    energy_bump: float


@dataclass
class World:
    config: CorpusConfig
    languages: list[LanguageSpec]
    speakers: list[SpeakerSpec]
    styles: list[StyleSpec]
    templates: np.ndarray  # [vocab, mel_dim], sidecar column zero
    base_durations: np.ndarray  # [vocab] ints
    pitch_pattern: np.ndarray  # [mel_dim], sidecar column zero

    @property
    def heldout(self) -> tuple[int, int]:
        return self.config.heldout_speaker, self.config.heldout_style


@dataclass
class Utterance:
    language_id: int
    speaker_id: int
    style_id: int
    phonemes: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    frames: np.ndarray
    seed: int
    uid: str = ""

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def num_phonemes(self) -> int:
        return int(self.phonemes.shape[0])

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(self.phonemes, self.durations)

    def to_bytes(self, index: int) -> bytes:
        head = np.array([index, self.language_id, self.speaker_id, self.style_id,
                         self.num_phonemes, self.num_frames, self.frames.shape[1], self.seed],
                        dtype="<i8")
        return b"".join([
            head.tobytes(),
            np.asarray(self.phonemes, dtype="<i8").tobytes(),
            np.asarray(self.durations, dtype="<i8").tobytes(),
            np.asarray(self.pitch, dtype="<f8").tobytes(),
            np.asarray(self.energy, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.frames, dtype="<f8").tobytes(),
        ])


def _rotation(rng: np.random.Generator, dim: int, angle: float, pairs: int) -> np.ndarray:
    rot = np.eye(dim)
    for _ in range(pairs):
        i, j = rng.choice(dim - 1, size=2, replace=False)  # never touches the sidecar
        theta = angle * rng.choice([-1.0, 1.0])
        g = np.eye(dim)
        g[i, i] = g[j, j] = np.cos(theta)
        g[i, j] = -np.sin(theta)
        g[j, i] = np.sin(theta)
        rot = g @ rot
    return rot


def _timbre_distance(a: SpeakerSpec, b: SpeakerSpec) -> float:
    return float(np.linalg.norm(a.matrix() - b.matrix()) + np.linalg.norm(a.bias - b.bias))


def build_world(config: CorpusConfig | None = None) -> World:
    """Draw languages, speakers and styles deterministically from ``config.seed``."""
    cfg = config or CorpusConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    d = cfg.mel_dim
    side = cfg.pitch_channel

    vocab = cfg.vocab_size
    shared = np.arange(cfg.shared_phonemes)
    only_a = np.arange(cfg.shared_phonemes, cfg.lang_a_phonemes)
    only_b = np.arange(cfg.lang_a_phonemes, vocab)
    languages = [
        LanguageSpec(0, np.concatenate([shared, only_a]), cfg.final_lengthening[0], cfg.declination[0]),
        LanguageSpec(1, np.concatenate([shared, only_b]), cfg.final_lengthening[1], cfg.declination[1]),
    ]

    # smooth random spectral templates
    raw = rng.normal(size=(vocab, d + 4))
    kernel = np.array([0.25, 0.5, 0.25])
    templates = np.stack([np.convolve(r, kernel, mode="same")[2 : 2 + d] for r in raw]) * 1.6
    templates[:, side] = 0.0
    channel = np.arange(d)
    pitch_pattern = np.cos(np.pi * channel / 6.0) * np.exp(-channel / 40.0)
    pitch_pattern[side] = 0.0
    lo, hi = cfg.base_duration_range
    base_durations = rng.integers(lo, hi + 1, size=vocab)

    speakers: list[SpeakerSpec] = []
    attempts = 0
    while len(speakers) < cfg.num_speakers:
        attempts += 1
        if attempts > 1000:
            raise ConfigError("could not place speakers above the timbre distance floor")
        scale = rng.uniform(*cfg.timbre_scale_range, size=d)
        bias = rng.normal(0.0, cfg.timbre_bias_sigma, size=d)
        scale[side] = 1.0
        bias[side] = 0.0
        rot = _rotation(rng, d, cfg.timbre_rotation, pairs=d // 4)
        sid = len(speakers)
        cand = SpeakerSpec(sid, scale, rot, bias, gender="F" if sid < (cfg.num_speakers + 1) // 2 else "M")
        if all(_timbre_distance(cand, s) >= cfg.min_timbre_distance for s in speakers):
            speakers.append(cand)

    styles = []
    periods = [1.0, 2.0, 0.5, 1.5, 3.0]
    for sid in range(cfg.num_styles):
        styles.append(StyleSpec(
            style_id=sid,
            pitch_base=float(rng.uniform(-0.5, 0.5)),
            pitch_range=float(rng.uniform(0.8, 1.2)),
            periodicity=periods[sid % len(periods)] + 0.25 * (sid // len(periods)),
            phase=float(np.pi * sid / 2.0),
            duration_multiplier=(float(rng.uniform(0.75, 1.35)), float(rng.uniform(0.75, 1.35))),
            energy_slope=float(rng.uniform(-1.0, 1.0)),
            energy_bump=float(rng.uniform(-0.5, 0.5)),
        ))
    return World(cfg, languages, speakers, styles, templates, base_durations, pitch_pattern)


def _round_durations(x: np.ndarray) -> np.ndarray:
    return np.maximum(1, np.floor(x + 0.5)).astype(np.int64)


def prosody(world: World, phonemes: np.ndarray, language: LanguageSpec, style: StyleSpec):
    """Durations, pitch and energy for a phoneme sequence (noise-free)."""
    n = len(phonemes)
    pos = (np.arange(n) + 0.5) / n
    mult = np.where(phonemes % 2 == 0, style.duration_multiplier[0], style.duration_multiplier[1])
    dur = world.base_durations[phonemes] * mult
    dur[-1] *= language.final_lengthening
    durations = _round_durations(dur)
    pitch = (style.pitch_base
             + style.pitch_range * np.sin(2 * np.pi * style.periodicity * pos + style.phase)
             + language.declination * (pos - 0.5))
    energy = style.energy_slope * (pos - 0.5) + style.energy_bump * np.cos(2 * np.pi * pos)
    return durations, pitch, energy


def render_frames(utt: Utterance, speaker: SpeakerSpec, world: World,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """frame = timbre(template * (1 + g_e * energy) + g_p * pitch * pattern) + noise."""
    cfg = world.config
    ph = utt.frame_phonemes()
    pitch = np.repeat(utt.pitch, utt.durations)
    energy = np.repeat(utt.energy, utt.durations)
    clean = (world.templates[ph] * (1.0 + cfg.energy_gain * energy)[:, None]
             + cfg.pitch_gain * pitch[:, None] * world.pitch_pattern[None, :])
    clean[:, cfg.pitch_channel] = pitch
    frames = speaker.apply(clean)
    if cfg.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(utt.seed)
        noise = rng.normal(0.0, 1.0, size=frames.shape)
        noise *= cfg.noise_sigma
        noise[:, cfg.pitch_channel] *= cfg.pitch_track_noise / cfg.noise_sigma
        frames = frames + noise
    return frames


def sample_utterance(world: World, language_id: int, speaker_id: int, style_id: int,
                     length_range: tuple[int, int] | None = None, seed: int = 0) -> Utterance:
    cfg = world.config
    for label, value, bound in (("language", language_id, 2), ("speaker", speaker_id, len(world.speakers)),
                                ("style", style_id, len(world.styles))):
        if not 0 <= value < bound:
            raise KeyError(f"unknown {label} id {value}")
    lo, hi = length_range or cfg.length_range
    if not 3 <= lo <= hi <= 40:
        raise ConfigError(f"length_range ({lo}, {hi}) must lie within [3, 40]")
    rng = np.random.default_rng(seed)
    lang = world.languages[language_id]
    n = int(rng.integers(lo, hi + 1))
    phonemes = rng.choice(lang.phonemes, size=n)
    durations, pitch, energy = prosody(world, phonemes, lang, world.styles[style_id])
    utt = Utterance(language_id, speaker_id, style_id, phonemes.astype(np.int64), durations,
                    pitch, energy, np.zeros((0, cfg.mel_dim)), seed)
    utt.frames = render_frames(utt, world.speakers[speaker_id], world, rng)
    return utt


def _utterance_seed(cfg: CorpusConfig, split: str, index: int) -> int:
    ss = np.random.SeedSequence([cfg.seed, _SPLIT_CODE[split], index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def allowed_in_training(cfg: CorpusConfig, language_id: int, speaker_id: int, style_id: int) -> bool:
    if language_id != 0:
        return True
    if cfg.heldout_scope == "pair":
        return not (speaker_id == cfg.heldout_speaker and style_id == cfg.heldout_style)
    return speaker_id != cfg.heldout_speaker and style_id != cfg.heldout_style


def _split_factors(cfg: CorpusConfig, split: str, count: int) -> list[tuple[int, int, int]]:
    combos = [(lang, spk, sty) for lang in range(2) for spk in range(cfg.num_speakers)
              for sty in range(cfg.num_styles)]
    if split != "test":
        combos = [c for c in combos if allowed_in_training(cfg, *c)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729, _SPLIT_CODE[split]]))
    # balanced cycle over combos, shuffled
    picks = [combos[i % len(combos)] for i in range(count)]
    order = rng.permutation(count)
    return [picks[i] for i in order]


@dataclass
class Corpus:
    world: World
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    @property
    def train(self) -> list[Utterance]:
        return self.splits["train"]

    @property
    def validation(self) -> list[Utterance]:
        return self.splits["validation"]

    @property
    def test(self) -> list[Utterance]:
        return self.splits["test"]


def generate_corpus(config: CorpusConfig | None = None) -> Corpus:
    cfg = config or CorpusConfig()
    world = build_world(cfg)
    counts = {"train": cfg.n_train, "validation": cfg.n_validation, "test": cfg.n_test}
    corpus = Corpus(world)
    for split in SPLITS:
        utts = []
        for i, (lang, spk, sty) in enumerate(_split_factors(cfg, split, counts[split])):
            utt = sample_utterance(world, lang, spk, sty, seed=_utterance_seed(cfg, split, i))
            utt.uid = f"{split}-{i:05d}"
            utts.append(utt)
        corpus.splits[split] = utts
    return corpus


def config_hash(obj) -> str:
    blob = json.dumps(obj if isinstance(obj, dict) else asdict(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_shard(path: Path, utterances: list[Utterance], start_index: int = 0) -> list[int]:
    """Append-free shard writer; returns the byte offset of each record."""
    offsets = []
    pos = 0
    with open(path, "wb") as fh:
        for i, utt in enumerate(utterances):
            blob = utt.to_bytes(start_index + i)
            offsets.append(pos)
            fh.write(blob)
            pos += len(blob)
    return offsets


def read_record(raw: bytes, offset: int) -> tuple[Utterance, int]:
    head = np.frombuffer(raw, dtype="<i8", count=_RECORD_HEAD, offset=offset)
    index, lang, spk, sty, p, t, d, seed = (int(v) for v in head)
    pos = offset + _RECORD_HEAD * 8
    phonemes = np.frombuffer(raw, "<i8", p, pos).astype(np.int64); pos += 8 * p
    durations = np.frombuffer(raw, "<i8", p, pos).astype(np.int64); pos += 8 * p
    pitch = np.frombuffer(raw, "<f8", p, pos).astype(np.float64); pos += 8 * p
    energy = np.frombuffer(raw, "<f8", p, pos).astype(np.float64); pos += 8 * p
    frames = np.frombuffer(raw, "<f8", t * d, pos).reshape(t, d).astype(np.float64); pos += 8 * t * d
    return Utterance(lang, spk, sty, phonemes, durations, pitch, energy, frames, seed), index


def read_shard(path: Path) -> list[Utterance]:
    raw = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(raw):
        utt, _ = read_record(raw, pos)
        pos += (_RECORD_HEAD + 4 * utt.num_phonemes + utt.frames.size) * 8
        out.append(utt)
    return out


def emit_corpus(config: CorpusConfig, out_dir: str | Path, corpus: Corpus | None = None) -> dict:
    """Generate (or take) a corpus and write shards plus manifest; returns the summary."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"corpus directory {out} is not writable")
    corpus = corpus or generate_corpus(config)
    rows = []
    for split in SPLITS:
        utts = corpus.splits[split]
        for shard_no, lo in enumerate(range(0, len(utts), config.shard_size)):
            chunk = utts[lo : lo + config.shard_size]
            name = f"{split}-{shard_no:03d}.bin"
            offsets = write_shard(out / name, chunk, lo)
            for utt, off in zip(chunk, offsets):
                rows.append((utt.uid, split, utt.language_id, utt.speaker_id, utt.style_id,
                             utt.num_phonemes, utt.num_frames, name, off))
    lines = ["\t".join(MANIFEST_COLUMNS)] + ["\t".join(str(v) for v in r) for r in rows]
    manifest = ("\n".join(lines) + "\n").encode()
    (out / "manifest.tsv").write_bytes(manifest)
    summary = {
        "config": asdict(config),
        "config_hash": config_hash(config),
        "manifest_sha256": hashlib.sha256(manifest).hexdigest(),
        "num_utterances": len(rows),
    }
    (out / "corpus.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def read_manifest(corpus_dir: str | Path) -> list[dict]:
    lines = Path(corpus_dir, "manifest.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        rec = dict(zip(header, line.split("\t")))
        for key in ("language_id", "speaker_id", "style_id", "num_phonemes", "num_frames", "offset"):
            rec[key] = int(rec[key])
        rows.append(rec)
    return rows


def load_corpus(corpus_dir: str | Path) -> Corpus:
    corpus_dir = Path(corpus_dir)
    summary = json.loads((corpus_dir / "corpus.json").read_text())
    raw_cfg = summary["config"]
    cfg = CorpusConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw_cfg.items()})
    corpus = Corpus(build_world(cfg), {s: [] for s in SPLITS})
    cache: dict[str, bytes] = {}
    for rec in read_manifest(corpus_dir):
        raw = cache.get(rec["shard"])
        if raw is None:
            raw = cache[rec["shard"]] = (corpus_dir / rec["shard"]).read_bytes()
        utt, _ = read_record(raw, rec["offset"])
        utt.uid = rec["id"]
        corpus.splits[rec["split"]].append(utt)
    return corpus
