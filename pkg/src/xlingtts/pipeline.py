"""Pipeline stages: corpus -> pretrain -> train-h2m / train-p2h -> synthesize / evaluate / ablate -> report.

Every stage writes into its own directory under the run directory.  Directories
are built under a ``.partial`` name and renamed when complete, so a failed stage
leaves nothing behind and a finished one is never rewritten.  ``run_manifest.json``
records, per stage, the hash of the config sections it depends on, its outputs
with their SHA-256 digests, wall-clock time and seeds.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .config import SYSTEMS, ExperimentConfig
from .corpus import Corpus, Utterance, emit_corpus, load_corpus, write_shard
from .evaluate import (
    CROSS,
    WITHIN,
    PhonemeRecognizer,
    SystemEvaluation,
    comparison_csv,
    evaluate_system,
    is_cross_lingual,
)
from .h2m import H2MDecoder, voice_convert
from .metrics import MetricReport, ProbeClassifier, pitch_contour_correlation
from .p2h import P2HModel
from .ssl import SSLPretrainer
from .svg import bar_chart, line_chart

log = logging.getLogger(__name__)

MANIFEST = "run_manifest.json"
SPLIT_TAGS = {WITHIN: "test-within-lingual", CROSS: "test-cross-lingual"}
WORKERS_ENV = "XLINGTTS_WORKERS"

# config sections each stage's artifacts depend on (seeds and mode flags are handled per directory)
STAGE_SECTIONS = {
    "corpus": ("corpus",),
    "pretrain": ("corpus", "ssl"),
    "train-h2m": ("corpus", "ssl", "h2m"),
    "train-p2h": ("corpus", "ssl", "p2h", "style"),
    "evaluate": ("corpus", "ssl", "p2h", "style", "h2m", "eval"),
    "ablate": ("corpus", "ssl", "p2h", "style", "h2m", "eval"),
}


class StageError(RuntimeError):
    """A stage cannot run; the message names the stage responsible."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class MissingArtifactError(StageError):
    pass


class StaleArtifactError(StageError):
    pass


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class Run:
    """A run directory plus its manifest."""

    def __init__(self, root: str | Path, config: ExperimentConfig):
        self.root = Path(root)
        self.config = config.validate()

    # -- manifest --------------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"stages": {}}
        return json.loads(self.manifest_path.read_text())

    def _record(self, key: str, stage: str, outputs: Path, seconds: float, seeds: Sequence[int],
                extra: dict | None = None) -> None:
        m = self.manifest()
        files = sorted(p for p in outputs.rglob("*") if p.is_file())
        m["stages"][key] = {
            "stage": stage,
            "config_hash": self.config.section_hash(*STAGE_SECTIONS.get(stage, ())),
            "outputs": {str(p.relative_to(self.root)): _sha256(p) for p in files},
            "wall_clock_s": round(seconds, 3),
            "seeds": list(seeds),
            **(extra or {}),
        }
        m["config_hash"] = self.config.hash()
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def require(self, stage: str, key: str, needed_by: str) -> dict:
        entry = self.manifest()["stages"].get(key)
        if entry is None:
            raise MissingArtifactError(
                stage, f"stage '{needed_by}' needs the output of stage '{stage}' ({key}) in {self.root}; "
                       f"run '{stage}' first")
        want = self.config.section_hash(*STAGE_SECTIONS[stage])
        if entry["config_hash"] != want:
            raise StaleArtifactError(
                stage, f"artifacts of '{key}' were built with config hash {entry['config_hash']} but the "
                       f"current config hashes to {want}; refusing to mix stale artifacts")
        return entry

    @contextmanager
    def stage_dir(self, stage: str, rel: str) -> Iterator[Path]:
        final = self.root / rel
        if final.exists():
            raise StageError(stage, f"{final} already exists; stage outputs are write-once")
        partial = final.with_name(final.name + ".partial")
        if partial.exists():
            shutil.rmtree(partial)
        partial.mkdir(parents=True)
        try:
            yield partial
        except BaseException:
            shutil.rmtree(partial, ignore_errors=True)
            raise
        partial.rename(final)

    def seeds(self, seed: int | None) -> list[int]:
        return [seed] if seed is not None else list(self.config.seeds)

    # -- artifact loaders --------------------------------------------------------
    def corpus(self, needed_by: str) -> Corpus:
        self.require("corpus", "corpus", needed_by)
        return load_corpus(self.root / "corpus")

    def ssl(self, seed: int, needed_by: str) -> SSLPretrainer:
        self.require("pretrain", "pretrain", needed_by)
        path = self.root / "pretrain" / f"seed{seed}" / "ssl.ckpt"
        if not path.exists():
            raise MissingArtifactError("pretrain", f"no pretrained encoder for seed {seed} ({path})")
        return SSLPretrainer.from_state(*load_checkpoint(path))

    def h2m(self, seed: int, needed_by: str) -> H2MDecoder:
        self.require("train-h2m", "train-h2m", needed_by)
        path = self.root / "h2m" / f"seed{seed}" / "h2m.ckpt"
        if not path.exists():
            raise MissingArtifactError("train-h2m", f"no H2M decoder for seed {seed} ({path})")
        return H2MDecoder.from_state(*load_checkpoint(path))

    def p2h(self, system: str, seed: int, needed_by: str) -> P2HModel:
        self.require("train-p2h", f"train-p2h/{system}", needed_by)
        path = self.root / "p2h" / system / f"seed{seed}" / "p2h.ckpt"
        if not path.exists():
            raise MissingArtifactError("train-p2h", f"no P2H model for {system}, seed {seed} ({path})")
        return P2HModel.from_state(*load_checkpoint(path))


# -- stages -------------------------------------------------------------------------

def cmd_corpus(run: Run) -> Path:
    t0 = time.time()
    with run.stage_dir("corpus", "corpus") as out:
        emit_corpus(run.config.corpus, out)
    run._record("corpus", "corpus", run.root / "corpus", time.time() - t0, [run.config.corpus.seed])
    return run.root / "corpus"


def cmd_pretrain(run: Run, seed: int | None = None) -> Path:
    corpus = run.corpus("pretrain")
    seeds = run.seeds(seed)
    t0 = time.time()
    with run.stage_dir("pretrain", "pretrain") as out:
        for s in seeds:
            d = out / f"seed{s}"
            d.mkdir()
            ssl = SSLPretrainer(run.config.ssl, random_state=s).fit(corpus.train, validation=corpus.validation)
            save_checkpoint(d / "ssl.ckpt", *ssl.state())
            if ssl.quality_report_ is not None:
                (d / "layer_quality.csv").write_text(ssl.quality_report_.to_csv())
            rows = [{"iteration": i, "step": step, "loss": loss, "num_clusters": hist["num_clusters"],
                     "source": hist["source"]}
                    for i, hist in enumerate(ssl.histories_) for step, loss in enumerate(hist["loss"])]
            _write_csv(d / "train_log.csv", rows)
            (d / "iterations.json").write_text(json.dumps(
                [{k: v for k, v in h.items() if k != "loss"} for h in ssl.histories_], indent=2, sort_keys=True))
            log.info("pretrain seed %d: bottleneck layer %d", s, ssl.layer_)
    run._record("pretrain", "pretrain", run.root / "pretrain", time.time() - t0, seeds)
    return run.root / "pretrain"


def _fit_h2m(run: Run, corpus: Corpus, ssl: SSLPretrainer, seed: int, out: Path) -> H2MDecoder:
    feats = ssl.transform(corpus.train)
    rows: list[dict] = []
    h2m = H2MDecoder(run.config.h2m, random_state=seed).fit(
        feats, [u.frames for u in corpus.train], [u.speaker_id for u in corpus.train], log_rows=rows)
    save_checkpoint(out / "h2m.ckpt", *h2m.state())
    _write_csv(out / "train_log.csv", rows)
    return h2m


def cmd_train_h2m(run: Run, seed: int | None = None) -> Path:
    corpus = run.corpus("train-h2m")
    seeds = run.seeds(seed)
    t0 = time.time()
    with run.stage_dir("train-h2m", "h2m") as out:
        for s in seeds:
            d = out / f"seed{s}"
            d.mkdir()
            _fit_h2m(run, corpus, run.ssl(s, "train-h2m"), s, d)
    run._record("train-h2m", "train-h2m", run.root / "h2m", time.time() - t0, seeds)
    return run.root / "h2m"


def _fit_p2h(cfg: ExperimentConfig, corpus: Corpus, feats: list[np.ndarray], seed: int, out: Path) -> P2HModel:
    rows: list[dict] = []
    model = P2HModel(cfg.p2h_config(), random_state=seed).fit(corpus.train, feats, log_rows=rows)
    save_checkpoint(out / "p2h.ckpt", *model.state())
    _write_csv(out / "train_log.csv", rows)
    return model


def _system_record(cfg: ExperimentConfig) -> dict:
    p = cfg.p2h_config()
    return {"system": cfg.system, "mi_enabled": p.mi_enabled, "adaptor_enabled": p.adaptor_enabled,
            "lambda_mi": p.lambda_mi}


def cmd_train_p2h(run: Run, seed: int | None = None) -> Path:
    corpus = run.corpus("train-p2h")
    seeds = run.seeds(seed)
    system = run.config.system
    t0 = time.time()
    with run.stage_dir("train-p2h", f"p2h/{system}") as out:
        for s in seeds:
            d = out / f"seed{s}"
            d.mkdir()
            _fit_p2h(run.config, corpus, run.ssl(s, "train-p2h").transform(corpus.train), s, d)
        (out / "system.json").write_text(json.dumps(_system_record(run.config), indent=2, sort_keys=True))
    run._record(f"train-p2h/{system}", "train-p2h", run.root / "p2h" / system, time.time() - t0, seeds,
                _system_record(run.config))
    return run.root / "p2h" / system


def cmd_synthesize(run: Run, language: int | None = None, speaker: int | None = None, style: int | None = None,
                   seed: int | None = None, count: int | None = None) -> Path:
    """Synthesize test-split texts of ``language`` as (speaker, style); defaults to the held-out triple."""
    cfg = run.config
    c = cfg.corpus
    language = 0 if language is None else language
    speaker = c.heldout_speaker if speaker is None else speaker
    style = c.heldout_style if style is None else style
    if not (0 <= language < 2 and 0 <= speaker < c.num_speakers and 0 <= style < c.num_styles):
        raise StageError("synthesize", f"triple (language={language}, speaker={speaker}, style={style}) "
                                       "is outside the corpus factors")
    corpus = run.corpus("synthesize")
    system = cfg.system
    seeds = run.seeds(seed)
    tag = "cross-lingual" if is_cross_lingual(c, language, speaker, style) else "within-lingual"
    texts = [u for u in corpus.test if u.language_id == language][: count or cfg.eval.requests_per_split]
    rel = f"synth/{system}-lang{language}-spk{speaker}-sty{style}"
    t0 = time.time()
    with run.stage_dir("synthesize", rel) as out:
        for s in seeds:
            p2h, h2m = run.p2h(system, s, "synthesize"), run.h2m(s, "synthesize")
            preds = p2h.predict([u.phonemes for u in texts], [language] * len(texts), [style] * len(texts))
            frames = h2m.predict_many([p["features"] for p in preds], [speaker] * len(texts))
            utts = [Utterance(language, speaker, style, u.phonemes, p["durations"], p["variances"].pitch,
                              p["variances"].energy, f, s, uid=f"synth-{u.uid}")
                    for u, p, f in zip(texts, preds, frames)]
            offsets = write_shard(out / f"seed{s}.bin", utts)
            _write_csv(out / f"seed{s}.tsv",
                       [{"id": u.uid, "source": t.uid, "num_frames": u.num_frames, "offset": o, "tag": tag}
                        for u, t, o in zip(utts, texts, offsets)])
        (out / "synth.json").write_text(json.dumps(
            {"tag": tag, "language_id": language, "speaker_id": speaker, "style_id": style,
             "system": system, "seeds": seeds}, indent=2, sort_keys=True))
    run._record(rel, "synthesize", run.root / rel, time.time() - t0, seeds, {"tag": tag})
    log.info("synthesized %d utterances per seed (%s) into %s", len(texts), tag, rel)
    return run.root / rel


# -- evaluation -----------------------------------------------------------------------

def speaker_probe(corpus: Corpus, utterances: int) -> ProbeClassifier:
    train = corpus.train[:utterances]
    x = np.concatenate([u.frames for u in train])
    y = np.concatenate([np.full(u.num_frames, u.speaker_id) for u in train])
    return ProbeClassifier().fit(x, y)


def speaker_accuracy(probe: ProbeClassifier, frames: Sequence[np.ndarray], speakers: Sequence[int]) -> float:
    groups = np.concatenate([np.full(len(f), i) for i, f in enumerate(frames)])
    pred = probe.predict_groups(np.concatenate(frames), groups)
    return float(np.mean(pred == np.asarray(speakers)))


def voice_conversion_probe(corpus: Corpus, ssl: SSLPretrainer, h2m: H2MDecoder, probe: ProbeClassifier,
                           pairs: Sequence[Sequence[int]], per_pair: int, pitch_channel: int) -> tuple[list, list]:
    """Per direction: target-speaker accuracy and median pitch correlation; plus the contours."""
    summary, contours = [], []
    for src, tgt in pairs:
        sources = [u for u in corpus.test if u.speaker_id == src][:per_pair]
        outs, corrs = [], []
        for u in sources:
            frames, sp, cp = voice_convert(u, tgt, ssl, h2m, pitch_channel)
            outs.append(frames)
            corrs.append(pitch_contour_correlation(sp, cp))
            if not contours or contours[-1]["pair"] != f"{src}->{tgt}":
                contours.extend({"pair": f"{src}->{tgt}", "utterance": u.uid, "frame": t,
                                 "source": float(a), "converted": float(b)} for t, (a, b) in enumerate(zip(sp, cp)))
        summary.append({"pair": f"{src}->{tgt}", "source_speaker": src, "target_speaker": tgt,
                        "target_accuracy": speaker_accuracy(probe, outs, [tgt] * len(outs)),
                        "pitch_corr_median": float(np.median(corrs)), "pitch_corr_min": float(np.min(corrs))})
    return summary, contours


def evaluate_seed(cfg: ExperimentConfig, corpus: Corpus, ssl: SSLPretrainer, h2m: H2MDecoder, p2h: P2HModel,
                  seed: int, name: str, recognizer: PhonemeRecognizer | None = None) -> SystemEvaluation:
    recognizer = recognizer or PhonemeRecognizer(random_state=seed).fit(corpus.train)
    return evaluate_system(name, p2h, h2m, recognizer, cfg.corpus, corpus.test, corpus.train,
                           cfg.eval.requests_per_split, cfg.eval.style_references, workers=worker_count())


def _median_evaluation(name: str, evals: Sequence[SystemEvaluation]) -> SystemEvaluation:
    merged = SystemEvaluation(name)
    for metric in evals[0].metrics:
        merged.metrics[metric] = {split: float(np.median([e.metrics[metric][split] for e in evals]))
                                  for split in (WITHIN, CROSS)}
    return merged


def cmd_evaluate(run: Run, seed: int | None = None) -> Path:
    cfg = run.config
    system = cfg.system
    for stage, key in (("train-h2m", "train-h2m"), ("train-p2h", f"train-p2h/{system}")):
        run.require(stage, key, "evaluate")
    corpus = run.corpus("evaluate")
    seeds = run.seeds(seed)
    probe = speaker_probe(corpus, cfg.eval.speaker_probe_utterances)
    t0 = time.time()
    rel = f"eval/{system}"
    evals = []
    with run.stage_dir("evaluate", rel) as out:
        for s in seeds:
            d = out / f"seed{s}"
            d.mkdir()
            ssl, h2m = run.ssl(s, "evaluate"), run.h2m(s, "evaluate")
            ev = evaluate_seed(cfg, corpus, ssl, h2m, run.p2h(system, s, "evaluate"), s, system)
            evals.append(ev)
            report = MetricReport(metadata={"config_hash": cfg.hash(), "seed": str(s), "system": system})
            for metric, splits in ev.metrics.items():
                for split, value in splits.items():
                    report.add(f"{metric}_{split}", value, SPLIT_TAGS[split])
            vc, contours = voice_conversion_probe(corpus, ssl, h2m, probe, cfg.eval.vc_pairs,
                                                  cfg.eval.vc_utterances, cfg.corpus.pitch_channel)
            for row in vc:
                pair = f"{row['source_speaker']}to{row['target_speaker']}"
                report.add(f"vc_accuracy_{pair}", row["target_accuracy"], "test")
                report.add(f"vc_pitch_corr_{pair}", row["pitch_corr_median"], "test")
            (d / "metrics.txt").write_text(report.to_text())
            (d / "metrics.csv").write_text(report.to_csv())
            _write_csv(d / "voice_conversion.csv", vc)
            _write_csv(d / "vc_pitch.csv", contours)
        (out / "summary.csv").write_text(comparison_csv([_median_evaluation(system, evals)]))
    run._record(rel, "evaluate", run.root / rel, time.time() - t0, seeds, _system_record(cfg))
    return run.root / rel


def run_ablation(cfg: ExperimentConfig, corpus: Corpus, ssl_by_seed: dict, h2m_by_seed: dict,
                 seeds: Sequence[int], out: Path | None = None) -> dict[str, list[SystemEvaluation]]:
    """Train and evaluate the full system and both ablations with shared seeds, SSL and H2M."""
    results: dict[str, list[SystemEvaluation]] = {name: [] for name in SYSTEMS}
    for s in seeds:
        ssl, h2m = ssl_by_seed[s], h2m_by_seed[s]
        feats = ssl.transform(corpus.train)
        recognizer = PhonemeRecognizer(random_state=s).fit(corpus.train)
        for name in SYSTEMS:
            sys_cfg = cfg.for_system(name)
            d = None
            if out is not None:
                d = out / name / f"seed{s}"
                d.mkdir(parents=True)
                (out / name / "system.json").write_text(json.dumps(_system_record(sys_cfg), indent=2, sort_keys=True))
            if d is not None:
                model = _fit_p2h(sys_cfg, corpus, feats, s, d)
            else:
                model = P2HModel(sys_cfg.p2h_config(), random_state=s).fit(corpus.train, feats)
            ev = evaluate_seed(sys_cfg, corpus, ssl, h2m, model, s, name, recognizer)
            results[name].append(ev)
            log.info("ablate seed %d %s: %s", s, name, ev.row())
    return results


def cmd_ablate(run: Run, seed: int | None = None) -> Path:
    cfg = run.config
    corpus = run.corpus("ablate")
    run.require("pretrain", "pretrain", "ablate")
    seeds = run.seeds(seed)
    have_h2m = "train-h2m" in run.manifest()["stages"]
    t0 = time.time()
    with run.stage_dir("ablate", "ablate") as out:
        ssl_by_seed = {s: run.ssl(s, "ablate") for s in seeds}
        h2m_by_seed = {}
        for s in seeds:
            if have_h2m:
                h2m_by_seed[s] = run.h2m(s, "ablate")
            else:
                d = out / "h2m" / f"seed{s}"
                d.mkdir(parents=True)
                h2m_by_seed[s] = _fit_h2m(run, corpus, ssl_by_seed[s], s, d)
        results = run_ablation(cfg, corpus, ssl_by_seed, h2m_by_seed, seeds, out)
        medians = [_median_evaluation(name, results[name]) for name in SYSTEMS]
        (out / "comparison.csv").write_text(comparison_csv(medians))
        per_seed = []
        for name in SYSTEMS:
            for s, ev in zip(seeds, results[name]):
                per_seed.append({"seed": s, **ev.row()})
        _write_csv(out / "comparison_seeds.csv", per_seed)
    systems = {name: _system_record(cfg.for_system(name)) for name in SYSTEMS}
    run._record("ablate", "ablate", run.root / "ablate", time.time() - t0, seeds, {"systems": systems})
    return run.root / "ablate" / "comparison.csv"


# -- report -----------------------------------------------------------------------------

class ReportError(RuntimeError):
    pass


def _first(paths: Sequence[Path]) -> Path | None:
    return next((p for p in paths if p.exists()), None)


def _collect_report(run_dir: Path) -> dict[str, list[dict]]:
    found: dict[str, list[dict]] = {}
    lq = _first(sorted(run_dir.glob("pretrain/seed*/layer_quality.csv")))
    if lq:
        found["layer_quality"] = _read_csv(lq)
    vc = _first(sorted(run_dir.glob("eval/*/seed*/vc_pitch.csv")))
    if vc:
        found["pitch_contours"] = _read_csv(vc)
    logs = sorted(run_dir.glob("p2h/full/seed*/train_log.csv")) + sorted(run_dir.glob("ablate/full/seed*/train_log.csv"))
    mi = _first(logs)
    if mi:
        rows = [r for r in _read_csv(mi) if r.get("mi_estimate") not in (None, "", "nan")]
        if rows:
            found["mi_trajectory"] = [{"step": r["step"], "mi_estimate": r["mi_estimate"],
                                       "q_loglik": r["q_loglik"]} for r in rows]
    return found


def _layer_chart(rows: list[dict]) -> str:
    layers = sorted({int(r["layer"]) for r in rows})
    ks = sorted({int(r["K"]) for r in rows})
    series = {f"PNMI K={k}": [float(next(r["pnmi"] for r in rows if int(r["layer"]) == l and int(r["K"]) == k))
                              for l in layers] for k in ks}
    series.update({f"purity K={k}": [float(next(r["purity"] for r in rows
                                                if int(r["layer"]) == l and int(r["K"]) == k)) for l in layers]
                   for k in ks})
    return bar_chart([str(l) for l in layers], series, "k-means quality per encoder layer", "layer", "score")


def _pitch_chart(rows: list[dict]) -> str:
    series = {}
    for pair in dict.fromkeys(r["pair"] for r in rows):
        sub = [r for r in rows if r["pair"] == pair]
        x = [float(r["frame"]) for r in sub]
        series[f"{pair} source"] = (x, [float(r["source"]) for r in sub])
        series[f"{pair} converted"] = (x, [float(r["converted"]) for r in sub])
    return line_chart(series, "source vs converted pitch", "frame", "pitch")


def _mi_chart(rows: list[dict]) -> str:
    x = [float(r["step"]) for r in rows]
    return line_chart({"vCLUB estimate": (x, [float(r["mi_estimate"]) for r in rows])},
                      "MI upper-bound estimate during training", "step", "nats")


def cmd_report(run_dirs: Sequence[str | Path], out: str | Path | None = None) -> list[Path]:
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    collected: dict[str, list[dict]] = {}
    for rd in map(Path, run_dirs):
        if not rd.is_dir():
            raise ReportError(f"{rd} is not a directory")
        for key, rows in _collect_report(rd).items():
            collected.setdefault(key, rows)
    if not collected:
        raise ReportError(f"no pretrain, evaluation or training artifacts found in {', '.join(map(str, run_dirs))}")
    charts = {"layer_quality": _layer_chart, "pitch_contours": _pitch_chart, "mi_trajectory": _mi_chart}
    rendered = {key: (charts[key](rows), rows) for key, rows in collected.items()}
    out_dir = Path(out) if out is not None else Path(run_dirs[0]) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, (svg_text, rows) in rendered.items():
        (out_dir / f"{key}.svg").write_text(svg_text)
        _write_csv(out_dir / f"{key}.csv", rows)
        written += [out_dir / f"{key}.svg", out_dir / f"{key}.csv"]
    summary = [f"{key}: {len(rows)} rows" for key, (_, rows) in rendered.items()]
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    return written
