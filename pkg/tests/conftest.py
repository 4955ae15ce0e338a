from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from sparsegate.mgs import GateTrainConfig, train_gate
from sparsegate.model import BaseModel
from sparsegate.toytrain import (DatasetSpec, SynthDataset, TrainConfig, generate_dataset,
                                 init_base, train_base)


@dataclass
class Trained:
    spec: DatasetSpec
    train: SynthDataset
    heldout: SynthDataset
    base: BaseModel
    curve: list


def make_trained(d=64, f=256, layers=6, n_train=8000, n_heldout=1000, epochs=10, seed=0,
                 shift=1.6) -> Trained:
    """Same recipe as ``sparsegate run`` with the default configuration."""
    spec = DatasetSpec(d=d, teacher_f=f, teacher_layers=layers, teacher_bias_shift=shift, seed=0)
    train = generate_dataset(spec, n_train, 1)
    heldout = generate_dataset(spec, n_heldout, 2)
    base, curve = train_base(init_base(d, f, layers, seed, shift), train,
                             TrainConfig(epochs=epochs, seed=seed, sparsity_bias_shift=shift))
    return Trained(spec, train, heldout, base, curve)


@pytest.fixture(scope="session")
def default_trained() -> Trained:
    return make_trained()


@pytest.fixture(scope="session")
def default_gates(default_trained):
    t = default_trained
    out = [train_gate(t.base, i, t.train, GateTrainConfig()) for i in range(t.base.layer_count)]
    return [g for g, _ in out], [m for _, m in out]


@pytest.fixture(scope="session")
def small_trained() -> Trained:
    return make_trained(d=16, f=64, layers=2, n_train=1500, n_heldout=300, epochs=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance reporting: tests marked ``criterion(n, text)`` are summarised as
# one pass/fail line per criterion at the end of the run.
_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, text = mark.args
    entry = _CRITERIA.setdefault(n, {"text": text, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        tail = f" ({'; '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"[{'PASS' if e['ok'] else 'FAIL'}] criterion {n}: {e['text']}{tail}")
