"""Shared fixtures: gradient-check helpers and desk-scale trained models.

Trained models are session scoped so the slow training runs happen once per
test session no matter how many tests use them.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from nowcast.cli import TRAIN_DEFAULTS, _optimizer_cfg, _spec_from, _train_cfg
from nowcast.forecaster import ForecasterSpec, build, fit
from nowcast.griddata import GeneratorConfig, generate_synthetic
from nowcast.kvconfig import read_kv
from nowcast.nn import grad_check
from nowcast.optim import Optimizer

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def forecaster_grad_check(gate_type, t_in=2, t_out=2, seed=0):
    """Full-model finite-difference check on the levels=2, channels=(2, 3), 4x4 micro config.

    Parameters are redrawn at scale 0.5 and the loss is a random projection
    ``sum(out * g)`` so that no gradient is small enough to be swamped by
    round-off in the central differences.
    """
    spec = ForecasterSpec(levels=2, channels=(2, 3), gate_type=gate_type, t_in=t_in, t_out=t_out, height=4, width=4)
    model = build(spec, seed, np.float64)
    rng = np.random.default_rng(seed)
    for v in model.params.values.values():
        v[...] = rng.normal(scale=0.5, size=v.shape)
    x = rng.uniform(size=(1, t_in, 4, 4, spec.in_channels))
    g = rng.normal(size=(1, t_out, 4, 4, spec.out_channels))

    def load(d):
        for k in model.params.names():
            model.params.values[k][...] = d[k]

    def op(d):
        load(d)
        out, cache = model.forward(d["input"])
        model.params.zero_grad()
        grads = {"input": model.backward(g, cache)}
        grads.update({k: model.params.grads[k].copy() for k in model.params.names()})
        return float((out * g).sum()), grads

    def loss_fn(d):
        load(d)
        return float((model.forward(d["input"])[0] * g).sum())

    inputs = {k: v.copy() for k, v in model.params.values.items()}
    inputs["input"] = x
    return grad_check(op, inputs, loss_fn=loss_fn)


# desk-scale training ------------------------------------------------------------------


def tiny_generator_config(**overrides):
    return replace(GeneratorConfig.from_mapping(read_kv(CONFIGS / "tiny_data.cfg")), **overrides)


def tiny_run_config(**overrides):
    cfg = dict(TRAIN_DEFAULTS)
    cfg.update(read_kv(CONFIGS / "tiny_train.cfg"))
    cfg.update({k: str(v) for k, v in overrides.items()})
    return cfg


def train_on(dataset, seed=0, **overrides):
    cfg = tiny_run_config(seed=seed, **overrides)
    model = build(_spec_from(cfg, dataset), seed)
    history = fit(model, dataset.arrays("train"), Optimizer(_optimizer_cfg(cfg)), _train_cfg(cfg),
                  dataset.arrays("validation"))
    return model, history


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(tiny_generator_config())


@pytest.fixture(scope="session")
def tiny_dataset_2x():
    cfg = tiny_generator_config()
    return generate_synthetic(replace(cfg, n_samples=2 * cfg.n_samples))


@pytest.fixture(scope="session")
def trained_model(tiny_dataset):
    return train_on(tiny_dataset, seed=0)


@pytest.fixture(scope="session")
def trained_model_seed1(tiny_dataset):
    return train_on(tiny_dataset, seed=1)


@pytest.fixture(scope="session")
def trained_model_2x(tiny_dataset_2x):
    return train_on(tiny_dataset_2x, seed=0)


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion that ran, in criterion order
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
