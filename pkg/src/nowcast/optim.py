"""Adam and AdaBelief with bias correction and decoupled weight decay."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError

DEFAULT_EPS = {"adam": 1e-7, "adabelief": 1e-14}


@dataclass
class OptimizerConfig:
    method: str = "adabelief"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = None
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in DEFAULT_EPS:
            raise ConfigurationError(f"unknown optimizer {self.method!r}; expected adam or adabelief")
        if self.eps is None:
            self.eps = DEFAULT_EPS[self.method]
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigurationError("lr and eps must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def _check(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")


def _moments(state, params, name):
    if name not in state.m:
        state.m[name] = np.zeros_like(params[name])
        state.v[name] = np.zeros_like(params[name])
    return state.m[name], state.v[name]


def adam_step(params, grads, state, cfg):
    """In-place Adam update of ``params`` (a name -> array mapping)."""
    _check(grads)
    state.t += 1
    c1 = 1 - cfg.beta1**state.t
    c2 = 1 - cfg.beta2**state.t
    for name, g in grads.items():
        m, v = _moments(state, params, name)
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        p = params[name]
        if cfg.weight_decay:
            p *= 1 - cfg.lr * cfg.weight_decay
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def adabelief_step(params, grads, state, cfg):
    """In-place AdaBelief update; ``eps`` is also added inside the belief accumulator."""
    _check(grads)
    state.t += 1
    c1 = 1 - cfg.beta1**state.t
    c2 = 1 - cfg.beta2**state.t
    for name, g in grads.items():
        m, s = _moments(state, params, name)
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        d = g - m
        s *= cfg.beta2
        s += (1 - cfg.beta2) * d * d + cfg.eps
        p = params[name]
        if cfg.weight_decay:
            p *= 1 - cfg.lr * cfg.weight_decay
        p -= cfg.lr * (m / c1) / (np.sqrt(s / c2) + cfg.eps)


class Optimizer:
    """Binds a config to its state and dispatches to the matching update rule."""

    def __init__(self, cfg=None, **kwargs):
        self.cfg = cfg or OptimizerConfig(**kwargs)
        self.state = OptimizerState()

    @property
    def lr(self):
        return self.cfg.lr

    @lr.setter
    def lr(self, value):
        self.cfg.lr = value

    def step(self, params, grads):
        rule = adam_step if self.cfg.method == "adam" else adabelief_step
        rule(params, grads, self.state, self.cfg)
