"""Shared test helpers: finite-difference oracles, tiny model configs, and
the acceptance-criteria summary lines."""

import numpy as np
import pytest

from flowdit.model import DiTModel, ModelConfig
from flowdit.tensor import no_grad

_ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE_RESULTS[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[nodeid]
        label = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"{label:>5}  {nodeid.split('::')[-1]}")


def rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-8) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def param_fd_grad(loss_fn, param, indices=None, h: float = 1e-5) -> np.ndarray:
    """Central differences of loss_fn() w.r.t. selected elements of a live
    parameter tensor (perturbed in place, restored afterwards)."""
    flat = param.data.reshape(-1)
    indices = list(range(flat.size)) if indices is None else list(indices)
    grads = np.zeros(len(indices))
    with no_grad():
        for j, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            grads[j] = (up - down) / (2 * h)
    return grads


def tiny_config(**overrides) -> ModelConfig:
    """2-block float64-friendly config small enough for exhaustive checks."""
    base = dict(layers=2, model_dim=8, head_schedule=[2, 2], patch_size=2,
                latent_channels=2, text_embed_dim=8, max_text_tokens=4,
                mlp_hidden_dim=8, time_freq_dim=8)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return DiTModel(tiny_config(), seed=0, dtype=np.float64)
