"""MLE and variational learning of the joint EBM prior model.

Both schemes are written as gradient ascent on a surrogate scalar whose
parameter gradient equals the Monte-Carlo learning gradient: positive-phase
terms are averaged over posterior (or inference) samples, negative-phase terms
over prior samples, and the normaliser never appears.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .model import LatentEbm, load_checkpoint
from .rng import stream
from .samplers import LangevinConfig, sample_posterior, sample_prior
from .tensor import Tape, Tensor

__all__ = [
    "TrainerConfig", "GradEstimates", "AdamState", "adam_update",
    "mle_gradients", "variational_gradients", "energy_gradients",
    "mle_step", "variational_step", "two_stage_fit", "Trainer",
]


@dataclass
class TrainerConfig:
    mode: str = "variational"
    batch_size: int = 100
    iterations: int = 1000
    stage1_iterations: int | None = None
    lr_alpha: float = 1e-4
    lr_beta: float = 1e-4
    lr_omega: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    optimizer: str = "adam"
    n_prior_chains: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 10
    persistent_prior: bool = False
    persistent_posterior: bool = False
    energy_to_inference: bool = True
    energy_l2: float = 0.0
    prior_sampler: LangevinConfig = field(default_factory=LangevinConfig)
    posterior_sampler: LangevinConfig = field(default_factory=lambda: LangevinConfig(steps=20))

    def __post_init__(self):
        if self.mode not in ("mle", "variational", "two_stage"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if min(self.lr_alpha, self.lr_beta, self.lr_omega) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.prior_sampler, dict):
            self.prior_sampler = LangevinConfig(**self.prior_sampler)
        if isinstance(self.posterior_sampler, dict):
            self.posterior_sampler = LangevinConfig(**self.posterior_sampler)

    @property
    def stage1(self) -> int:
        if self.mode != "two_stage":
            return 0
        return self.iterations // 2 if self.stage1_iterations is None else self.stage1_iterations

    def learning_rate(self, name: str) -> float:
        group = name.split(".", 1)[0]
        return {"alpha": self.lr_alpha, "beta0": self.lr_beta, "beta": self.lr_beta,
                "omega": self.lr_omega}[group]

    def to_dict(self) -> dict:
        return asdict(self)


class GradEstimates(NamedTuple):
    """Ascent directions per parameter name plus scalar diagnostics."""
    grads: dict[str, np.ndarray]
    diagnostics: dict[str, float]

    def norm(self, group: str) -> float:
        sq = sum(float(np.sum(g.astype(np.float64) ** 2)) for k, g in self.grads.items()
                 if k.split(".", 1)[0] == group)
        return float(np.sqrt(sq))


# --------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                lr: float | Callable[[str], float], beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One Adam ascent step; parameters without a gradient are left alone.

    The step counter is shared across parameters.
    """
    state.t += 1
    out = dict(params)
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        p = params[name]
        if g.shape != p.shape:
            raise T.DimensionError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr(name) if callable(lr) else lr
        out[name] = (p + step * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return out


def _apply(model: LatentEbm, est: GradEstimates, cfg: TrainerConfig, state: AdamState) -> None:
    params = model.arrays()
    if cfg.optimizer == "sgd":
        new = {k: (params[k] + cfg.learning_rate(k) * g).astype(params[k].dtype) for k, g in est.grads.items()}
    else:
        new = adam_update(params, est.grads, state, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                          cfg.adam_eps)
    model.set_arrays({k: new[k] for k in est.grads})


# --------------------------------------------------------------------------
# surrogate objectives

def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def _mean(v: Tensor) -> Tensor:
    return T.scale(T.sum_(v), 1.0 / v.shape[0])


def _prior_terms(model: LatentEbm, z: Sequence[Tensor], with_energy: bool = True) -> Tensor:
    """sum_i f_i(z_i) + sum_{i<L} log p(z_i | z_{i+1}) per row (top Gaussian omitted)."""
    conds = model.prior.layer_log_conditionals(z)[:-1]
    terms = (model.prior.layer_energies(z) if with_energy else []) + conds
    if not terms:
        return T.scale(T.sum_(z[0], axis=1), 0.0)
    return _sum(terms)


def _consts(model: LatentEbm, z) -> list[Tensor]:
    return [Tensor(np.asarray(a), dtype=model.dtype) for a in z]


def _energies_are_zero(model: LatentEbm) -> bool:
    for head in model.prior.energies:
        net = head.net
        last = net.n_layers - 1
        if np.any(net._params[f"W{last}"].data) or np.any(net._params[f"b{last}"].data):
            return False
    return True


def _gradients(tape: Tape, objective: Tensor, params: dict[str, Tensor], groups) -> dict[str, np.ndarray]:
    names = [k for k in params if k.split(".", 1)[0] in groups]
    grads = tape.gradient(objective, [params[k] for k in names])
    return dict(zip(names, grads))


def mle_gradients(model: LatentEbm, x: np.ndarray, z_pos: Sequence[np.ndarray], z_neg: Sequence[np.ndarray],
                  groups=("alpha", "beta0", "beta"), energy_l2: float = 0.0) -> GradEstimates:
    """Learning gradient of log p(x) from posterior samples ``z_pos`` and prior samples ``z_neg``.

    alpha:  mean grad f(z+) - mean grad f(z-)
    beta_i: mean grad log p(z+_i | z+_{i+1}) - same under z-
    beta_0: mean grad log p(x | z+_1)
    """
    params = model.named_parameters()
    xt = model.tensor(x)
    with Tape() as tape:
        tape.watch_all(params[k] for k in params if k.split(".", 1)[0] in groups)
        zp, zn = _consts(model, z_pos), _consts(model, z_neg)
        ll = model.decoder.log_likelihood(xt, zp[0])
        f_pos = model.prior.energy_sum(zp)
        f_neg = model.prior.energy_sum(zn)
        pos = _mean(_sum([ll, _prior_terms(model, zp)]))
        neg = _mean(_prior_terms(model, zn))
        objective = T.sub(pos, neg)
        if energy_l2 > 0:
            objective = T.sub(objective, T.scale(T.add(_mean(T.square(f_pos)), _mean(T.square(f_neg))), energy_l2))
        grads = _gradients(tape, objective, params, groups)
    g0 = model.decoder.mean(zp[0]).data
    diag = {
        "recon": float(np.mean(np.sum((np.asarray(x) - g0) ** 2, axis=1))),
        "energy_pos": float(-np.mean(f_pos.data)),
        "energy_neg": float(-np.mean(f_neg.data)),
        "kl": None,
        "objective": float(objective.data),
    }
    return GradEstimates(grads, diag)


def energy_gradients(model: LatentEbm, z_pos: Sequence[np.ndarray], z_neg: Sequence[np.ndarray],
                     energy_l2: float = 0.0) -> GradEstimates:
    """alpha-only gradient: mean grad f(z+) - mean grad f(z-)."""
    params = model.named_parameters()
    with Tape() as tape:
        tape.watch_all(v for k, v in params.items() if k.startswith("alpha."))
        f_pos = model.prior.energy_sum(_consts(model, z_pos))
        f_neg = model.prior.energy_sum(_consts(model, z_neg))
        objective = T.sub(_mean(f_pos), _mean(f_neg))
        if energy_l2 > 0:
            objective = T.sub(objective, T.scale(T.add(_mean(T.square(f_pos)), _mean(T.square(f_neg))), energy_l2))
        grads = _gradients(tape, objective, params, ("alpha",))
    return GradEstimates(grads, {"recon": None, "energy_pos": float(-np.mean(f_pos.data)),
                                 "energy_neg": float(-np.mean(f_neg.data)), "kl": None,
                                 "objective": float(objective.data)})


def _kl_estimate(model: LatentEbm, inf) -> Tensor:
    """Per-row estimate of KL(q(z|x) || p_beta(z)).

    Entropies of the inference conditionals and the top-layer KL to N(0, I)
    are analytic given the sampled parents; the cross terms log p(z_i | z_{i+1})
    are evaluated at the sample.
    """
    L = model.n_layers
    terms = []
    for i in range(L - 1):
        lv = inf.log_vars[i]
        neg_entropy = T.add_scalar(T.scale(T.sum_(lv, axis=1), -0.5), -0.5 * lv.shape[1] * (T.LOG_2PI + 1.0))
        mean, log_var = model.prior.conditionals[i](inf.z[i + 1])
        terms.append(T.sub(neg_entropy, T.gaussian_log_density(inf.z[i], mean, log_var)))
    m, lv = inf.means[-1], inf.log_vars[-1]
    top = T.scale(T.sum_(T.sub(T.add(T.exp(lv), T.square(m)), lv), axis=1), 0.5)
    terms.append(T.add_scalar(top, -0.5 * m.shape[1]))
    return _sum(terms)


def variational_gradients(model: LatentEbm, x: np.ndarray, z_neg: Sequence[np.ndarray] | None,
                          rng: np.random.Generator | None = None, noise=None,
                          groups=("alpha", "beta0", "beta", "omega"), energy_to_inference: bool = True,
                          energy_l2: float = 0.0) -> GradEstimates:
    """Joint-KL learning gradients with a reparameterised inference sample.

    The surrogate is E_q[log p(x|z) - KL-estimate + sum f(z)] minus the
    negative phase sum f(z-) + log p_beta(z-), so beta_0, alpha, beta and
    omega receive their respective gradients from one backward pass.
    ``z_neg`` may be ``None`` only when every energy head is identically zero,
    where the negative phase has zero expectation for beta and alpha is frozen.
    """
    if model.encoder is None:
        raise ValueError("variational learning needs an inference stack")
    params = model.named_parameters()
    xt = model.tensor(x)
    with Tape() as tape:
        tape.watch_all(params[k] for k in params if k.split(".", 1)[0] in groups)
        inf = model.encoder.infer(xt, rng=rng, noise=noise)
        ll = model.decoder.log_likelihood(xt, inf.z[0])
        kl = _kl_estimate(model, inf)
        z_for_f = inf.z if energy_to_inference else _consts(model, [z.data for z in inf.z])
        f_pos = model.prior.energy_sum(z_for_f)
        pos = _mean(_sum([ll, T.neg(kl), f_pos]))
        objective = pos
        f_neg = None
        if z_neg is not None:
            zn = _consts(model, z_neg)
            f_neg = model.prior.energy_sum(zn)
            objective = T.sub(pos, _mean(_prior_terms(model, zn)))
            if energy_l2 > 0:
                objective = T.sub(objective, T.scale(T.add(_mean(T.square(f_pos)), _mean(T.square(f_neg))),
                                                     energy_l2))
        grads = _gradients(tape, objective, params, groups)
    g0 = model.decoder.mean(inf.z[0]).data
    diag = {
        "recon": float(np.mean(np.sum((np.asarray(x) - g0) ** 2, axis=1))),
        "energy_pos": float(-np.mean(f_pos.data)),
        "energy_neg": None if f_neg is None else float(-np.mean(f_neg.data)),
        "kl": float(np.mean(kl.data)),
        "elbo_gaussian": float(np.mean(ll.data - kl.data)),
        "objective": float(objective.data),
    }
    return GradEstimates(grads, diag)


# --------------------------------------------------------------------------
# steps

def _n_chains(cfg: TrainerConfig, batch: np.ndarray) -> int:
    return cfg.n_prior_chains or batch.shape[0]


def mle_step(model: LatentEbm, batch: np.ndarray, cfg: TrainerConfig, rng: np.random.Generator,
             state: AdamState | None = None, z_pos_init=None, z_neg_init=None) -> GradEstimates:
    """One MLE iteration: posterior and prior Langevin, then an ascent step.

    The returned diagnostics carry the final chain states under ``"_z_pos"``
    and ``"_z_neg"`` for persistent-chain bookkeeping.
    """
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    state = state if state is not None else AdamState()
    z_neg, _ = sample_prior(model.prior, _n_chains(cfg, batch), cfg.prior_sampler, rng, z_init=z_neg_init)
    z_pos, _ = sample_posterior(model.decoder, model.prior, batch, cfg.posterior_sampler, rng, z_init=z_pos_init)
    est = mle_gradients(model, batch, z_pos, z_neg, energy_l2=cfg.energy_l2)
    _apply(model, est, cfg, state)
    est.diagnostics["_z_pos"], est.diagnostics["_z_neg"] = z_pos, z_neg
    return est


def variational_step(model: LatentEbm, batch: np.ndarray, cfg: TrainerConfig, rng: np.random.Generator,
                     state: AdamState | None = None, groups=("alpha", "beta0", "beta", "omega"),
                     z_neg_init=None) -> GradEstimates:
    """One joint-KL iteration (inference sample, prior Langevin, ascent on all ``groups``)."""
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    state = state if state is not None else AdamState()
    z_neg = None
    if "alpha" in groups or not _energies_are_zero(model):
        z_neg, _ = sample_prior(model.prior, _n_chains(cfg, batch), cfg.prior_sampler, rng, z_init=z_neg_init)
    est = variational_gradients(model, batch, z_neg, rng=rng, groups=groups,
                                energy_to_inference=cfg.energy_to_inference, energy_l2=cfg.energy_l2)
    _apply(model, est, cfg, state)
    est.diagnostics["_z_neg"] = z_neg
    return est


def energy_step(model: LatentEbm, batch: np.ndarray, cfg: TrainerConfig, rng: np.random.Generator,
                state: AdamState | None = None, z_neg_init=None) -> GradEstimates:
    """Second-stage update: alpha only, positives from q, negatives from noise-space Langevin."""
    batch = np.asarray(batch, dtype=model.dtype)
    state = state if state is not None else AdamState()
    z_pos = [z.data for z in model.encoder.infer(model.tensor(batch), rng=rng).z]
    prior_cfg = LangevinConfig(**{**asdict(cfg.prior_sampler), "space": "epsilon"})
    z_neg, _ = sample_prior(model.prior, _n_chains(cfg, batch), prior_cfg, rng, z_init=z_neg_init)
    est = energy_gradients(model, z_pos, z_neg, cfg.energy_l2)
    _apply(model, est, cfg, state)
    est.diagnostics["_z_neg"] = z_neg
    return est


def two_stage_fit(model: LatentEbm, dataset: np.ndarray, cfg: TrainerConfig, rng: np.random.Generator | None = None,
                  callback: Callable | None = None) -> LatentEbm:
    """Stage 1: hierarchical VAE with energies frozen at zero. Stage 2: energies only."""
    trainer = Trainer(model, cfg if cfg.mode == "two_stage" else TrainerConfig(**{**asdict(cfg), "mode": "two_stage"}))
    trainer.fit(dataset, callback=callback)
    return model


# --------------------------------------------------------------------------
# loop

class Trainer:
    """Iterates steps with per-iteration random streams so runs can resume exactly."""

    def __init__(self, model: LatentEbm, cfg: TrainerConfig):
        self.model = model
        self.cfg = cfg
        self.state = AdamState()
        self.iteration = 0
        self.history: list[dict] = []
        self._prior_buf = None
        self._post_buf: dict[int, list[np.ndarray]] = {}

    def stage(self, it: int) -> str:
        if self.cfg.mode != "two_stage":
            return self.cfg.mode
        return "vae" if it < self.cfg.stage1 else "energy"

    def step(self, dataset: np.ndarray) -> GradEstimates:
        cfg = self.cfg
        it = self.iteration
        n = dataset.shape[0]
        idx = stream(cfg.seed, "batch", it).choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = dataset[idx]
        rng = stream(cfg.seed, "step", it)
        stage = self.stage(it)
        if stage == "vae" and it == 0 and self.cfg.mode == "two_stage":
            self.model.zero_energies()
        if stage == "energy" and it == cfg.stage1:
            # fresh moments for the new parameter group
            self.state = AdamState()
            self._prior_buf = None
        neg_init = self._prior_buf if cfg.persistent_prior else None
        if stage == "mle":
            pos_init = None
            if cfg.persistent_posterior and all(int(i) in self._post_buf for i in idx):
                pos_init = [np.stack([self._post_buf[int(i)][l] for i in idx]) for l in range(self.model.n_layers)]
            est = mle_step(self.model, batch, cfg, rng, self.state, z_pos_init=pos_init, z_neg_init=neg_init)
            if cfg.persistent_posterior:
                for r, i in enumerate(idx):
                    self._post_buf[int(i)] = [a[r].copy() for a in est.diagnostics["_z_pos"]]
        elif stage == "variational":
            est = variational_step(self.model, batch, cfg, rng, self.state, z_neg_init=neg_init)
        elif stage == "vae":
            est = variational_step(self.model, batch, cfg, rng, self.state, groups=("beta0", "beta", "omega"))
        else:
            est = energy_step(self.model, batch, cfg, rng, self.state, z_neg_init=neg_init)
        if cfg.persistent_prior and est.diagnostics.get("_z_neg") is not None:
            self._prior_buf = est.diagnostics["_z_neg"]
        self.iteration += 1
        return est

    def metrics(self, est: GradEstimates, wall_ms: float) -> dict:
        d = est.diagnostics
        return {
            "iter": self.iteration,
            "recon": d.get("recon"),
            "energy_pos": d.get("energy_pos"),
            "energy_neg": d.get("energy_neg"),
            "kl": d.get("kl"),
            "grad_norm_alpha": est.norm("alpha"),
            "grad_norm_beta": float(np.hypot(est.norm("beta"), est.norm("beta0"))),
            "wall_ms": round(wall_ms, 3),
        }

    def fit(self, dataset: np.ndarray, out_dir=None, callback: Callable | None = None) -> list[dict]:
        """Run until ``cfg.iterations``; writes metrics/checkpoints when ``out_dir`` is set."""
        dataset = np.asarray(dataset, dtype=self.model.dtype)
        if dataset.ndim != 2 or dataset.shape[0] == 0:
            raise ValueError("training data must be a non-empty (n, d) array")
        out = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            path = out / "metrics.jsonl"
            kept = []
            if self.iteration and path.exists():
                # drop rows written after the checkpoint we resumed from
                kept = [ln for ln in path.read_text().splitlines()
                        if ln.strip() and json.loads(ln)["iter"] <= self.iteration]
            metrics_fh = open(path, "w")
            metrics_fh.writelines(ln + "\n" for ln in kept)
        try:
            while self.iteration < self.cfg.iterations:
                t0 = time.perf_counter()
                est = self.step(dataset)
                row = self.metrics(est, 1000.0 * (time.perf_counter() - t0))
                self.history.append(row)
                if callback is not None:
                    callback(self, row)
                if metrics_fh is not None and self.cfg.log_every and self.iteration % self.cfg.log_every == 0:
                    metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                    metrics_fh.flush()
                if out is not None and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                    self.save(out / "checkpoints" / f"iter_{self.iteration:06d}")
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        if out is not None:
            self.save(out / "checkpoints" / "final")
        return self.history

    def save(self, path) -> None:
        extra = {}
        for k, v in self.state.m.items():
            extra[f"adam.m.{k}"] = v
        for k, v in self.state.v.items():
            extra[f"adam.v.{k}"] = v
        if self._prior_buf is not None:
            for l, a in enumerate(self._prior_buf):
                extra[f"buffer.prior.{l}"] = np.asarray(a)
        meta = {"iteration": self.iteration, "adam_t": self.state.t, "trainer": self.cfg.to_dict()}
        self.model.save(path, extra=extra, meta=meta)

    @classmethod
    def resume(cls, path, cfg: TrainerConfig | None = None) -> "Trainer":
        model, extra, meta = load_checkpoint(path)
        if cfg is None:
            cfg = TrainerConfig(**meta["trainer"])
        tr = cls(model, cfg)
        tr.iteration = int(meta.get("iteration", 0))
        tr.state.t = int(meta.get("adam_t", 0))
        for k, v in extra.items():
            if k.startswith("adam.m."):
                tr.state.m[k[len("adam.m."):]] = v.copy()
            elif k.startswith("adam.v."):
                tr.state.v[k[len("adam.v."):]] = v.copy()
        bufs = sorted((k for k in extra if k.startswith("buffer.prior.")), key=lambda k: int(k.rsplit(".", 1)[1]))
        if bufs:
            tr._prior_buf = [extra[k].copy() for k in bufs]
        return tr
