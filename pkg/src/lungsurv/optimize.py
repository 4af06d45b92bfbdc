"""SGD with momentum/weight decay, a triangular cyclic schedule, and SAM.

The SAM step evaluates the loss twice: gradients at the current point give
the perturbation direction, gradients at the perturbed point drive the base
SGD update. Both passes must see identical stochastic regularization, so the
loss closure receives a ``pass_rng`` seeded once per step.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError
from .diffcore import Param


@dataclass
class OptimConfig:
    lr_init: float = 1e-3          # classification default; cox heads use 5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 24
    sam_rho: float = 0.05
    sam_adaptive: bool = False     # elementwise |w|-scaled perturbation; off by default
    lr_lo: float | None = None     # cyclic bounds; None -> lr_init/10 and lr_init
    lr_hi: float | None = None
    half_period: int | None = None  # steps from trough to peak; None -> one epoch

    def __post_init__(self):
        if self.lr_init <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("rates must be positive, momentum/decay nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.sam_rho < 0:
            raise ConfigurationError("sam_rho must be >= 0")
        if self.half_period is not None and self.half_period < 1:
            raise ConfigurationError("half_period must be >= 1")
        if self.lr_lo is None:
            self.lr_lo = self.lr_init / 10.0
        if self.lr_hi is None:
            self.lr_hi = self.lr_init
        if self.lr_lo > self.lr_hi:
            raise ConfigurationError(f"lr_lo {self.lr_lo} exceeds lr_hi {self.lr_hi}")


def cyclic_lr(step: int, cfg: OptimConfig) -> float:
    """Triangular wave: lr_lo at step 0, lr_hi at half_period, back at period."""
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    if cfg.half_period is None:
        raise ConfigurationError("half_period unresolved; set it or let the trainer derive it")
    phase = step % (2 * cfg.half_period)
    frac = phase / cfg.half_period
    if frac > 1.0:
        frac = 2.0 - frac
    return cfg.lr_lo + (cfg.lr_hi - cfg.lr_lo) * frac


class SgdOptimizer:
    """Momentum SGD over a list of Params, with coupled L2 decay."""

    def __init__(self, params: list[Param], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr_t: float):
        """Apply one update from the gradients currently in the Params."""
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {p.name}")
            g = g + self.cfg.weight_decay * p.value
            v *= self.cfg.momentum
            v += g
            p.value -= lr_t * v

    def state_dict(self):
        return {"velocity": [v.copy() for v in self.velocity]}

    def load_state_dict(self, state):
        vs = state["velocity"]
        if len(vs) != len(self.velocity):
            raise ConfigurationError("optimizer state does not match parameter count")
        for mine, saved in zip(self.velocity, vs):
            if mine.shape != np.asarray(saved).shape:
                raise ConfigurationError("optimizer state shape mismatch")
            mine[...] = saved


def sgd_step(params, grads, velocity, cfg: OptimConfig, lr_t: float):
    """Functional form of the update, for callers managing state themselves."""
    new_params, new_velocity = [], []
    for w, g, v in zip(params, grads, velocity):
        w = np.asarray(w, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        g = g + cfg.weight_decay * w
        v = cfg.momentum * v + g
        new_params.append(w - lr_t * v)
        new_velocity.append(v)
    return new_params, new_velocity


class SamOptimizer:
    """Sharpness-aware wrapper: perturb along the gradient, update from there.

    ``loss_fn(pass_rng)`` must run forward+backward and leave fresh gradients
    in the Params; it is called twice per step with rngs spawned from the
    same per-step seed, so dropout masks agree across the two passes.
    """

    def __init__(self, params: list[Param], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.base = SgdOptimizer(self.params, cfg)

    def _grad_norm(self):
        if self.cfg.sam_adaptive:
            sq = sum(float(np.sum((np.abs(p.value) * p.grad) ** 2)) for p in self.params)
        else:
            sq = sum(float(np.sum(p.grad ** 2)) for p in self.params)
        return np.sqrt(sq)

    def step(self, loss_fn, lr_t: float, step_seed: int = 0):
        for p in self.params:
            p.grad[...] = 0.0
        loss = loss_fn(np.random.default_rng(step_seed))
        if self.cfg.sam_rho == 0.0:
            self.base.step(lr_t)
            return loss

        norm = self._grad_norm()
        if norm == 0.0:
            self.base.step(lr_t)
            return loss

        scale = self.cfg.sam_rho / norm
        eps = []
        for p in self.params:
            if self.cfg.sam_adaptive:
                e = scale * np.abs(p.value) ** 2 * p.grad
            else:
                e = scale * p.grad
            eps.append(e)
            p.value += e
        for p in self.params:
            p.grad[...] = 0.0
        loss_fn(np.random.default_rng(step_seed))
        for p, e in zip(self.params, eps):
            p.value -= e
        self.base.step(lr_t)
        return loss

    def state_dict(self):
        return self.base.state_dict()

    def load_state_dict(self, state):
        self.base.load_state_dict(state)


def grid_search(space: dict, objective):
    """Exhaustive search; highest objective wins, lexicographic tie-break.

    ``space`` maps hyperparameter name to a candidate list; ``objective``
    receives one config dict and returns a validation score (higher better).
    Returns (best_config, best_score, trials).
    """
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigurationError("grid space must have at least one candidate per knob")
    names = sorted(space)
    best_cfg, best_score = None, None
    trials = []
    for combo in itertools.product(*(space[n] for n in names)):
        cfg = dict(zip(names, combo))
        score = float(objective(cfg))
        trials.append((cfg, score))
        if best_score is None or score > best_score:
            best_cfg, best_score = cfg, score
    return best_cfg, best_score, trials
