import time
from dataclasses import dataclass, field

import pytest
from threadpoolctl import threadpool_limits

from syntaxgen.data import build_vocabs, expander_examples, generator_examples, synthetic_corpus
from syntaxgen.model import ExpanderModel, GeneratorModel, ModelConfig
from syntaxgen.train import TrainConfig, train_model

_acceptance: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _acceptance.setdefault(marker.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_acceptance, key=lambda s: int(s.split()[0][2:])):
        outcomes = _acceptance[label]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{status}  {label}")


# ---------------------------------------------------------------------------
# overfit fixture shared by the acceptance, decode and cli tests

OVERFIT_CONFIG = ModelConfig(d_m=64, d_k=16, d_v=16, h1=2, h2=2, h_enc=4, n1=2, n2=2, d_ff=128, seed=0)
OVERFIT_TRAIN = TrainConfig(steps=1000, batch_size=16, seed=0)


@dataclass
class Overfit:
    records: list
    vocabs: object
    expander: ExpanderModel
    generator: GeneratorModel
    expander_log: list
    generator_log: list
    seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def synthetic():
    return synthetic_corpus(32, seed=0)


@pytest.fixture(scope="session")
def overfit(synthetic):
    vocabs = build_vocabs(synthetic)
    with threadpool_limits(limits=1):
        t = time.perf_counter()
        exp = ExpanderModel(OVERFIT_CONFIG, vocabs)
        exp_log = train_model(exp, expander_examples(synthetic), OVERFIT_TRAIN)
        t_exp = time.perf_counter() - t
        t = time.perf_counter()
        gen = GeneratorModel(OVERFIT_CONFIG, vocabs)
        gen_log = train_model(gen, generator_examples(synthetic), OVERFIT_TRAIN)
        t_gen = time.perf_counter() - t
    return Overfit(synthetic, vocabs, exp, gen, exp_log, gen_log, {"expander": t_exp, "generator": t_gen})
