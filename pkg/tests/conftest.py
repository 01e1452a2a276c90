
import pytest
import torch

from idstack.adapters import mock_adapters
from idstack.data_pipeline import PipelineConfig, build_dataset
from idstack.diffusion import ModelConfig
from idstack.synthetic import write_corpus

torch.set_num_threads(1)

# criterion number -> (description, outcome, seconds)
ACCEPTANCE_RESULTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, text): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, text = mark.args
    entry = ACCEPTANCE_RESULTS.setdefault(number, [text, "PASS", 0.0])
    entry[2] += rep.duration
    if rep.failed:
        entry[1] = "FAIL"
    elif rep.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        text, outcome, secs = ACCEPTANCE_RESULTS[number]
        tr.write_line(f"criterion {number:2d}: {outcome}  {text}  ({secs:.1f}s)")


@pytest.fixture(scope="session")
def acceptance_results():
    return ACCEPTANCE_RESULTS


@pytest.fixture(scope="session")
def adapters():
    return mock_adapters(0)


@pytest.fixture(scope="session")
def tiny_model_config():
    # small enough for double-precision gradient checks
    return ModelConfig(width=8, heads=2, lora_rank=2, feat_dim=64, embed_dim=32, latent_size=8)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, adapters):
    """2 identities x 5 portrait images, through the full pipeline."""
    root = tmp_path_factory.mktemp("corpus")
    out = tmp_path_factory.mktemp("dataset")
    write_corpus(root, ["alice", "bob"], 5, seed=3, placement="portrait")
    entries, report = build_dataset(root, out, PipelineConfig(seed=0), adapters)
    return out, entries, report
