"""Unadjusted Langevin dynamics over latent stacks, in z-space and noise space.

Every chain owns its own random stream (derived from the caller's generator
and the chain index), so results do not depend on how a batch is split.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .model import JointEbmPrior, GeneratorDecoder
from .rng import chain_generators
from .tensor import Tape, Tensor

__all__ = [
    "LangevinConfig", "ChainRecord", "TargetEval", "DivergedChainError",
    "langevin", "grad_log_prior", "grad_log_posterior", "epsilon_transform",
    "epsilon_inverse", "grad_log_prior_eps", "conditional_prior_langevin",
    "sample_prior", "sample_posterior", "export_chain_csv",
]

_NOISE_BLOCK = 256


@dataclass
class LangevinConfig:
    steps: int = 40
    step_size: float = 0.1
    noise: bool = True
    space: str = "z"
    clamp_grad: float | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.space not in ("z", "epsilon"):
            raise ValueError(f"space must be 'z' or 'epsilon', got {self.space!r}")
        if self.clamp_grad is not None and not self.clamp_grad > 0:
            raise ValueError("clamp_grad must be positive when set")


class DivergedChainError(FloatingPointError):
    def __init__(self, chains, step: int, last_state: list[np.ndarray]):
        self.chains = list(chains)
        self.step = step
        self.last_state = last_state
        super().__init__(f"Langevin chain(s) {self.chains[:10]} diverged at step {step}")


class TargetEval(NamedTuple):
    grad: list[np.ndarray]
    log_target: np.ndarray | None = None
    energy: np.ndarray | None = None


@dataclass
class ChainRecord:
    thin: int | None
    space: str = "z"
    steps: list[int] = field(default_factory=list)
    snapshots: list[list[np.ndarray]] = field(default_factory=list)
    log_target: list[np.ndarray] = field(default_factory=list)
    energy: list[np.ndarray] = field(default_factory=list)
    diverged: bool = False

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        """(steps+1, chains) arrays of log-target and energy values."""
        return np.array(self.log_target), np.array(self.energy)


class _ChainNoise:
    """Standard normal draws, one stream per chain, generated in blocks."""

    def __init__(self, rng: np.random.Generator, n: int, dims: Sequence[int], dtype):
        self.gens = chain_generators(rng, n)
        self.dims = list(dims)
        self.total = sum(self.dims)
        self.dtype = dtype
        self._buf = None
        self._pos = 0

    def next(self) -> list[np.ndarray]:
        if self._buf is None or self._pos == self._buf.shape[0]:
            n = len(self.gens)
            block = np.empty((_NOISE_BLOCK, n, self.total))
            for c, g in enumerate(self.gens):
                block[:, c, :] = g.standard_normal((_NOISE_BLOCK, self.total))
            self._buf = block.astype(self.dtype, copy=False)
            self._pos = 0
        row = self._buf[self._pos]
        self._pos += 1
        out, start = [], 0
        for d in self.dims:
            out.append(row[:, start:start + d])
            start += d
        return out


def _as_eval(res) -> TargetEval:
    if isinstance(res, TargetEval):
        return res
    return TargetEval([np.asarray(g) for g in res])


def _locate_bad_chains(grad_log_target, z) -> list[int]:
    n = z[0].shape[0]
    bad = []
    for c in range(n):
        try:
            ev = _as_eval(grad_log_target([zi[c:c + 1] for zi in z]))
            if not all(np.isfinite(g).all() for g in ev.grad):
                bad.append(c)
        except FloatingPointError:
            bad.append(c)
    return bad or list(range(n))


def langevin(grad_log_target: Callable, z0: Sequence[np.ndarray], cfg: LangevinConfig,
             rng: np.random.Generator, record_every: int | None = None,
             frozen: Sequence[int] = ()) -> tuple[list[np.ndarray], ChainRecord]:
    """z_t = z_{t-1} + s * grad log p(z_{t-1}) + sqrt(2 s) * e_{t-1}, all layers at once.

    ``grad_log_target`` maps a list of (chains, d_i) arrays to the per-layer
    gradients, either as a plain list or a :class:`TargetEval` that also
    carries per-chain log-target and energy values for the record. Layers in
    ``frozen`` keep their initial value.
    """
    z = [np.array(a, copy=True) for a in z0]
    n = z[0].shape[0]
    frozen = set(frozen)
    record = ChainRecord(thin=record_every)
    dtype = z[0].dtype if z[0].dtype in (np.float32, np.float64) else np.float64
    noise = _ChainNoise(rng, n, [a.shape[1] for a in z], dtype) if cfg.noise and cfg.steps > 0 else None
    s = float(cfg.step_size)
    root2s = float(np.sqrt(2.0 * s))

    def evaluate(step):
        try:
            ev = _as_eval(grad_log_target(z))
        except FloatingPointError:
            record.diverged = True
            raise DivergedChainError(_locate_bad_chains(grad_log_target, z), step, z) from None
        bad = np.zeros(n, dtype=bool)
        for g in ev.grad:
            bad |= ~np.isfinite(g).all(axis=1)
        if bad.any():
            record.diverged = True
            raise DivergedChainError(np.flatnonzero(bad).tolist(), step, z)
        if record_every is not None:
            if ev.log_target is not None:
                record.log_target.append(np.array(ev.log_target, copy=True))
            if ev.energy is not None:
                record.energy.append(np.array(ev.energy, copy=True))
        return ev

    def snapshot(step):
        if record_every is not None and step % record_every == 0:
            record.steps.append(step)
            record.snapshots.append([a.copy() for a in z])

    snapshot(0)
    if len(frozen) == len(z):
        return z, record
    for t in range(cfg.steps):
        ev = evaluate(t)
        eps = noise.next() if noise is not None else None
        prev = [a.copy() for a in z]
        for i, g in enumerate(ev.grad):
            if i in frozen:
                continue
            if cfg.clamp_grad is not None:
                norms = np.linalg.norm(g, axis=1, keepdims=True)
                g = g * np.minimum(1.0, cfg.clamp_grad / np.maximum(norms, 1e-300))
            step = z[i] + s * g
            if eps is not None:
                step = step + root2s * eps[i]
            z[i] = step.astype(z[i].dtype, copy=False)
        bad = np.zeros(n, dtype=bool)
        for a in z:
            bad |= ~np.isfinite(a).all(axis=1)
        if bad.any():
            record.diverged = True
            raise DivergedChainError(np.flatnonzero(bad).tolist(), t + 1, prev)
        snapshot(t + 1)
    if record_every is not None and cfg.steps > 0:
        evaluate(cfg.steps)
    elif record_every is not None:
        evaluate(0)
    return z, record


# --------------------------------------------------------------------------
# gradients of the model targets

def _watched(tape: Tape, arrays, dtype) -> list[Tensor]:
    return [tape.watch(Tensor(np.asarray(a), dtype=dtype)) for a in arrays]


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def grad_log_prior(prior: JointEbmPrior, z: Sequence[np.ndarray]) -> TargetEval:
    """Gradient of sum_i f_i(z_i) + log p_beta(z) w.r.t. every layer."""
    with Tape() as tape:
        zs = _watched(tape, z, prior.dtype)
        energy = prior.energy_sum(zs)
        value = T.add(energy, prior.gaussian_log_prob(zs))
        grads = tape.gradient(T.sum_(value), zs)
    return TargetEval(grads, value.data, -energy.data)


def grad_log_posterior(dec: GeneratorDecoder, prior: JointEbmPrior, x, z: Sequence[np.ndarray]) -> TargetEval:
    """Gradient of log p(x | z_1) + unnormalised log prior w.r.t. every layer."""
    xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x), dtype=prior.dtype)
    with Tape() as tape:
        zs = _watched(tape, z, prior.dtype)
        energy = prior.energy_sum(zs)
        value = _total([dec.log_likelihood(xt, zs[0]), energy, prior.gaussian_log_prob(zs)])
        grads = tape.gradient(T.sum_(value), zs)
    return TargetEval(grads, value.data, -energy.data)


def epsilon_transform(prior: JointEbmPrior, eps: Sequence, fixed: dict | None = None) -> list[np.ndarray]:
    return [t.data.copy() for t in prior.epsilon_transform(eps, fixed)]


def epsilon_inverse(prior: JointEbmPrior, z: Sequence) -> list[np.ndarray]:
    return prior.epsilon_inverse(z)


def grad_log_prior_eps(prior: JointEbmPrior, eps: Sequence[np.ndarray],
                       fixed: dict[int, np.ndarray] | None = None) -> TargetEval:
    """Gradient in noise space of f(T(e)) + log N(e; 0, I).

    Layers in ``fixed`` are held at the given z-values; their noise entries get
    zero gradient and the log-conditionals of fixed layers enter the target,
    since their parents may move.
    """
    fixed = fixed or {}
    with Tape() as tape:
        es = _watched(tape, eps, prior.dtype)
        z = prior.epsilon_transform(es, fixed)
        energy = prior.energy_sum(z)
        terms = [energy]
        for i, e in enumerate(es):
            if i not in fixed:
                terms.append(T.add_scalar(T.scale(T.sum_(T.square(e), axis=1), -0.5),
                                          -0.5 * prior.dims[i] * T.LOG_2PI))
        if fixed:
            for i, lp in enumerate(prior.layer_log_conditionals(z)):
                if i in fixed:
                    terms.append(lp)
        value = _total(terms)
        grads = tape.gradient(T.sum_(value), es)
    return TargetEval(grads, value.data, -energy.data)


def _z_snapshots(prior, record, fixed=None):
    record.snapshots = [epsilon_transform(prior, snap, fixed) for snap in record.snapshots]
    record.space = "z"


def conditional_prior_langevin(prior: JointEbmPrior, fixed_layers, z_init: Sequence[np.ndarray],
                               cfg: LangevinConfig, rng: np.random.Generator,
                               record_every: int | None = None) -> tuple[list[np.ndarray], ChainRecord]:
    """Prior Langevin over the layers not in ``fixed_layers`` (0-based indices).

    Fixed layers keep their values from ``z_init`` and condition the others.
    """
    fixed_layers = sorted(set(fixed_layers))
    z_init = [np.asarray(a, dtype=prior.dtype) for a in z_init]
    if any(i < 0 or i >= prior.n_layers for i in fixed_layers):
        raise ValueError(f"fixed layer indices must lie in [0, {prior.n_layers})")
    if cfg.space == "z":
        return langevin(lambda z: grad_log_prior(prior, z), z_init, cfg, rng, record_every, frozen=fixed_layers)
    fixed = {i: z_init[i] for i in fixed_layers}
    eps0 = prior.epsilon_inverse(z_init)
    for i in fixed_layers:
        eps0[i] = np.zeros_like(z_init[i])
    eps, record = langevin(lambda e: grad_log_prior_eps(prior, e, fixed), eps0, cfg, rng, record_every,
                           frozen=fixed_layers)
    _z_snapshots(prior, record, fixed)
    return epsilon_transform(prior, eps, fixed), record


def sample_prior(prior: JointEbmPrior, n: int, cfg: LangevinConfig, rng: np.random.Generator,
                 record_every: int | None = None, z_init: Sequence[np.ndarray] | None = None
                 ) -> tuple[list[np.ndarray], ChainRecord]:
    """Prior Langevin started from the Gaussian backbone (or ``z_init``)."""
    if z_init is None:
        eps0 = [rng.standard_normal((n, d)).astype(prior.dtype) for d in prior.dims]
    else:
        eps0 = prior.epsilon_inverse(z_init)
    if cfg.space == "z":
        z0 = epsilon_transform(prior, eps0) if z_init is None else [np.asarray(a, dtype=prior.dtype) for a in z_init]
        return langevin(lambda z: grad_log_prior(prior, z), z0, cfg, rng, record_every)
    eps, record = langevin(lambda e: grad_log_prior_eps(prior, e), eps0, cfg, rng, record_every)
    _z_snapshots(prior, record)
    return epsilon_transform(prior, eps), record


def sample_posterior(dec: GeneratorDecoder, prior: JointEbmPrior, x, cfg: LangevinConfig,
                     rng: np.random.Generator, z_init: Sequence[np.ndarray] | None = None
                     ) -> tuple[list[np.ndarray], ChainRecord]:
    """Short-run posterior Langevin, one chain per row of ``x``.

    Chains start from an ancestral Gaussian-prior draw unless ``z_init`` is given.
    """
    x = np.atleast_2d(np.asarray(x, dtype=prior.dtype))
    xt = Tensor(x, dtype=prior.dtype)
    z0 = prior.ancestral_sample(x.shape[0], rng) if z_init is None else [np.asarray(a, dtype=prior.dtype)
                                                                         for a in z_init]
    return langevin(lambda z: grad_log_posterior(dec, prior, xt, z), z0, cfg, rng)


def export_chain_csv(record: ChainRecord, states_path, energy_path=None, chain_offset: int = 0) -> None:
    """Write snapshots as (chain, step, layer, coordinate, value) rows and,
    optionally, the per-step (chain, step, energy, log_prior) profile."""
    with open(states_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "step", "layer", "coordinate", "value"])
        for step, snap in zip(record.steps, record.snapshots):
            for layer, arr in enumerate(snap):
                for c in range(arr.shape[0]):
                    for j in range(arr.shape[1]):
                        w.writerow([c + chain_offset, step, layer + 1, j, repr(float(arr[c, j]))])
    if energy_path is not None:
        log_target, energy = record.values()
        with open(energy_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "step", "energy", "log_prior"])
            for step in range(len(log_target)):
                for c in range(log_target.shape[1]):
                    e = energy[step, c] if len(energy) else float("nan")
                    w.writerow([c + chain_offset, step, repr(float(e)), repr(float(log_target[step, c]))])
