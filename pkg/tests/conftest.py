import numpy as np
import pytest
import torch

from lipvox.corpus import Corpus, generate_corpus
from lipvox.config import TrainConfig
from lipvox.embedders import SurrogateConfig, pretrain_surrogates, save_surrogates
from lipvox.training import train


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(2, 2, 2.0, seed=3, root=root)
    return root


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir):
    return Corpus(tiny_corpus_dir)


@pytest.fixture(scope="session")
def tiny_surrogates_path(tiny_corpus, tmp_path_factory):
    cfg = SurrogateConfig(seed=0, steps=10, batch_size=4)
    path = tmp_path_factory.mktemp("surr") / "surrogates.ckpt"
    save_surrogates(pretrain_surrogates(tiny_corpus, cfg), path, cfg)
    return path


@pytest.fixture(scope="session")
def tiny_surrogates(tiny_surrogates_path):
    from lipvox.embedders import load_surrogates
    return load_surrogates(tiny_surrogates_path)


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus, tiny_surrogates, tmp_path_factory):
    cfg = TrainConfig(batch_size=2, learning_rate=1e-3, max_epochs=1, critic_iters_per_gen=1, seed=0)
    out = tmp_path_factory.mktemp("run")
    return train(tiny_corpus, cfg, out, surrogates=tiny_surrogates)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def acceptance_report(request):
    lines = []
    request.config._acceptance_lines = lines

    def report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        lines.append(line)
        print(line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
