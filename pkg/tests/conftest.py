import json

import numpy as np
import pytest

from xlingtts.corpus import CorpusConfig, generate_corpus

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_CORPUS = CorpusConfig(n_train=96, n_validation=16, n_test=48, shard_size=40)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL_CORPUS)


@pytest.fixture(scope="session")
def tiny_ssl(small_corpus):
    from xlingtts.ssl import SSLEncoderConfig, SSLPretrainer

    cfg = SSLEncoderConfig(num_conv_layers=1, num_seq_layers=2, hidden_dim=16, ff_dim=32,
                           num_clusters_per_iteration=[8], steps_per_iteration=30,
                           report_cluster_sizes=[8], report_utterances=48)
    return SSLPretrainer(cfg, random_state=0).fit(small_corpus.train)


@pytest.fixture(scope="session")
def tiny_targets(small_corpus, tiny_ssl):
    return tiny_ssl.transform(small_corpus.train)


TINY_RUN = {
    "corpus": {"n_train": 120, "n_validation": 20, "n_test": 60, "shard_size": 50},
    "ssl": {"num_conv_layers": 1, "num_seq_layers": 2, "hidden_dim": 16, "ff_dim": 32,
            "num_clusters_per_iteration": [8], "steps_per_iteration": 20, "report_cluster_sizes": [8],
            "report_utterances": 40, "kmeans_fit_frames": 3000},
    "p2h": {"steps": 20, "bottleneck_dim": 16},
    "h2m": {"steps": 20, "bottleneck_dim": 16},
    "seeds": [0],
    "eval": {"requests_per_split": 6, "vc_utterances": 3, "speaker_probe_utterances": 60},
}


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


def run_pipeline(out, config_path, verbs=("corpus", "pretrain", "train-h2m", "train-p2h", "evaluate")):
    from xlingtts.cli import main
    for verb in verbs:
        code = main([verb, "--config", str(config_path), "--out", str(out)])
        assert code == 0, verb
    return out
