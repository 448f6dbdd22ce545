"""Numerical oracles: central finite differences, grid quadrature and a
plain-numpy ELBO, used by ``jointebm gradcheck`` and the test-suite."""
from __future__ import annotations

import copy
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .model import LOG_VAR_MAX, LOG_VAR_MIN, LatentEbm, ModelConfig
from .samplers import grad_log_posterior, grad_log_prior, grad_log_prior_eps
from .tensor import Tape, Tensor
from .training import TrainerConfig, mle_gradients, variational_gradients, variational_step

__all__ = [
    "rel_err", "fd_gradient", "toy_model", "check_operations", "quadrature_log_px",
    "grid_samples", "quadrature_identity", "numpy_elbo", "elbo_oracle", "langevin_variance", "run_suite",
]

OP_TOL = 1e-6
QUAD_TOL = 1e-2
ELBO_TOL = 1e-6


def rel_err(a, b) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def fd_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Five-point central differences, coordinate by coordinate."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for step in (2 * h, h, -h, -2 * h):
            flat[i] = orig + step
            vals.append(fn(x))
        flat[i] = orig
        gf[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def toy_model(latent_dims: Sequence[int], data_dim: int = 3, hidden: int = 6, seed: int = 0,
              energy_scale: float = 0.5) -> LatentEbm:
    """Small float64 model whose energy heads are randomised (non-zero)."""
    cfg = ModelConfig(data_dim=data_dim, latent_dims=list(latent_dims), energy_hidden=[hidden],
                      cond_hidden=[hidden], dec_hidden=[hidden], enc_hidden=[hidden], dtype="float64",
                      init_seed=seed)
    model = LatentEbm(cfg)
    rng = np.random.default_rng([seed, 1])
    new = {}
    for k, v in model.arrays().items():
        if k.startswith("alpha.") and k.split(".")[-1] in ("W1", "b1"):
            new[k] = energy_scale * rng.standard_normal(v.shape)
    model.set_arrays(new)
    return model


# --------------------------------------------------------------------------
# finite-difference suite

def _param_check(model: LatentEbm, names: Sequence[str], value: Callable[[], Tensor]) -> float:
    params = model.named_parameters()
    with Tape() as tape:
        tape.watch_all(params[k] for k in names)
        out = value()
        grads = tape.gradient(out, [params[k] for k in names])
    worst = 0.0
    for name, g in zip(names, grads):
        base = model.arrays()[name]

        def fn(p, name=name):
            model.set_arrays({name: p})
            return float(value().data)

        fd = fd_gradient(fn, base)
        model.set_arrays({name: base})
        worst = max(worst, rel_err(g, fd))
    return worst


def _latent_check(fn: Callable[[list[np.ndarray]], float], z: list[np.ndarray], grads: list[np.ndarray],
                  skip: Sequence[int] = ()) -> float:
    worst = 0.0
    for i in range(len(z)):
        if i in skip:
            continue

        def f(a, i=i):
            zz = list(z)
            zz[i] = a
            return fn(zz)

        worst = max(worst, rel_err(grads[i], fd_gradient(f, z[i])))
    return worst


def check_operations(latent_dims: Sequence[int] = (2, 2), seed: int = 0, n_points: int = 20,
                     corrupt: bool = False) -> dict[str, float]:
    """Worst relative error against central differences for each differentiable piece."""
    errs: dict[str, float] = {}

    def note(name, e):
        errs[name] = max(errs.get(name, 0.0), e)

    for p in range(n_points):
        model = toy_model(latent_dims, seed=seed * 1000 + p)
        prior, dec = model.prior, model.decoder
        rng = np.random.default_rng([seed, p, 7])
        z = [rng.standard_normal((1, d)) for d in prior.dims]
        x = rng.standard_normal((1, dec.data_dim))
        L = prior.n_layers

        for i, head in enumerate(prior.energies):
            names = [k for k in model.named_parameters() if k.startswith(f"alpha.{i}.")]
            note("energy_head.params", _param_check(model, names, lambda: T.sum_(head(Tensor(z[i])))))
        for i, cond in enumerate(prior.conditionals):
            names = [k for k in model.named_parameters() if k.startswith(f"beta.{i}.")]

            def cond_val(i=i, cond=cond):
                m, lv = cond(Tensor(z[i + 1]))
                return T.sum_(T.gaussian_log_density(Tensor(z[i]), m, lv))

            note("conditional_gaussian.params", _param_check(model, names, cond_val))
        dec_names = [k for k in model.named_parameters() if k.startswith("beta0.")]
        note("decoder_likelihood.params",
             _param_check(model, dec_names, lambda: T.sum_(dec.log_likelihood(Tensor(x), Tensor(z[0])))))

        def log_prior(zz):
            return float(prior.unnormalized_log_prob(zz).data.sum())

        g = grad_log_prior(prior, z).grad
        if corrupt:
            g = [gi * 1.01 for gi in g]
        note("grad_log_prior", _latent_check(log_prior, z, g))

        def log_post(zz):
            return float((dec.log_likelihood(Tensor(x), Tensor(zz[0])).data + prior.unnormalized_log_prob(zz).data).sum())

        note("grad_log_posterior", _latent_check(log_post, z, grad_log_posterior(dec, prior, x, z).grad))

        eps = [rng.standard_normal((1, d)) for d in prior.dims]

        def eps_target(ee, fixed=None):
            return float(grad_log_prior_eps(prior, ee, fixed).log_target.sum())

        note("grad_log_prior_eps", _latent_check(eps_target, eps, grad_log_prior_eps(prior, eps).grad))
        if L > 1:
            fixed = {L - 1: z[L - 1]}
            g = grad_log_prior_eps(prior, eps, fixed).grad
            note("grad_log_prior_eps.conditional",
                 _latent_check(lambda ee: eps_target(ee, fixed), eps, g, skip=[L - 1]))
    return errs


# --------------------------------------------------------------------------
# quadrature oracle for dims (1, 1)

def _trapezoid_log_weights(n: int, lim: float) -> tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(-lim, lim, n)
    w = np.full(n, grid[1] - grid[0])
    w[0] = w[-1] = w[0] / 2
    return grid, np.log(w)


def _grid_terms(model: LatentEbm, x: np.ndarray, n: int, lim: float):
    """Log prior weights on the (z1, z2) grid and log p(x | z1) on the z1 axis."""
    if model.prior.dims != [1, 1]:
        raise ValueError("quadrature oracle needs latent dims (1, 1)")
    grid, lw = _trapezoid_log_weights(n, lim)
    g = Tensor(grid[:, None])
    f1 = model.prior.energies[0](g).data
    f2 = model.prior.energies[1](g).data
    mean, lv = model.prior.conditionals[0](g)
    mu, lv = mean.data[:, 0], lv.data[:, 0]
    # rows index z1, columns index z2
    cond = -0.5 * (T.LOG_2PI + lv[None, :] + (grid[:, None] - mu[None, :]) ** 2 * np.exp(-lv[None, :]))
    top = -0.5 * (T.LOG_2PI + grid ** 2)
    log_prior = f1[:, None] + (f2 + top)[None, :] + cond + lw[:, None] + lw[None, :]
    xs = np.repeat(np.atleast_2d(x), n, axis=0)
    ll = model.decoder.log_likelihood(Tensor(xs), g).data
    return grid, log_prior, ll


def quadrature_log_px(model: LatentEbm, x, n: int = 2001, lim: float = 8.0) -> float:
    """log p(x) by tensor-product trapezoid quadrature, normaliser included."""
    _, log_prior, ll = _grid_terms(model, x, n, lim)
    return float(logsumexp(log_prior + ll[:, None]) - logsumexp(log_prior))


def grid_samples(model: LatentEbm, x, m: int, rng: np.random.Generator, n: int = 2001, lim: float = 8.0):
    """Exact draws from the grid-discretised posterior and prior."""
    grid, log_prior, ll = _grid_terms(model, x, n, lim)

    def draw(logw):
        p = np.exp(logw - logsumexp(logw)).ravel()
        idx = rng.choice(p.size, size=m, p=p / p.sum())
        i, j = np.unravel_index(idx, logw.shape)
        return [grid[i][:, None], grid[j][:, None]]

    return draw(log_prior + ll[:, None]), draw(log_prior)


def quadrature_identity(seed: int = 0, n_samples: int = 100_000, n_grid: int = 2001, hidden: int = 4,
                        corrupt: bool = False) -> dict[str, float]:
    """Monte-Carlo learning gradient versus the finite difference of quadrature log p(x).

    The probed alpha and beta entries are those with the largest ratio of
    gradient to Monte-Carlo standard error (estimated from batch means).
    """
    model = toy_model([1, 1], data_dim=1, hidden=hidden, seed=seed, energy_scale=1.0)
    x = np.array([[1.5]])
    h = 1e-4
    out = {}
    fd = {}
    for name, base in model.arrays().items():
        if not (name.startswith("alpha.") or name.startswith("beta.")):
            continue

        def fn(p, name=name):
            model.set_arrays({name: p})
            return quadrature_log_px(model, x, n_grid)

        fd[name] = fd_gradient(fn, base, h)
        model.set_arrays({name: base})
    rng = np.random.default_rng([seed, 11])
    z_pos, z_neg = grid_samples(model, x, n_samples, rng, n_grid)
    groups = ("alpha", "beta")
    est = mle_gradients(model, np.repeat(x, n_samples, axis=0), z_pos, z_neg, groups=groups)
    # batch means give a standard error per entry
    n_batches = 20
    parts = np.array_split(np.arange(n_samples), n_batches)
    batch_grads = [mle_gradients(model, np.repeat(x, len(b), axis=0), [z[b] for z in z_pos],
                                 [z[b] for z in z_neg], groups=groups).grads for b in parts]
    for group in groups:
        best = None
        for name, ref in fd.items():
            if not name.startswith(group + "."):
                continue
            se = np.std([bg[name] for bg in batch_grads], axis=0) / np.sqrt(n_batches)
            # entries with a structurally zero gradient (e.g. an energy offset) carry no signal
            snr = np.where(np.abs(ref) > 1e-6, np.abs(ref) / np.maximum(se, 1e-300), 0.0)
            idx = np.unravel_index(np.argmax(snr), snr.shape)
            if best is None or snr[idx] > best[2]:
                best = (name, idx, snr[idx])
        name, idx, _ = best
        mc = est.grads[name][idx] * (1.05 if corrupt else 1.0)
        ref = fd[name][idx]
        out[f"{group}:{name}{[int(i) for i in idx]}"] = float(abs(mc - ref) / abs(ref))
    return out


# --------------------------------------------------------------------------
# independent ELBO oracle

def _np_mlp(arrays: dict, prefix: str, x: np.ndarray, slope: float) -> np.ndarray:
    h = x
    j = 0
    while f"{prefix}W{j}" in arrays:
        h = h @ arrays[f"{prefix}W{j}"] + arrays[f"{prefix}b{j}"]
        if f"{prefix}W{j + 1}" in arrays:
            h = np.where(h >= 0, h, slope * h)
        j += 1
    return h


def _np_gauss(x, mean, log_var):
    return np.sum(-0.5 * (np.log(2 * np.pi) + log_var + (x - mean) ** 2 / np.exp(log_var)), axis=-1)


def numpy_elbo(arrays: dict, config: ModelConfig, x: np.ndarray, noise: Sequence[np.ndarray]) -> float:
    """Batch-mean single-sample ELBO of a Gaussian hierarchical VAE, written directly in numpy.

    Entropy of each bottom-up conditional and the top-layer KL are analytic;
    the cross terms log p(z_i | z_{i+1}) and log p(x | z_1) are evaluated at
    the reparameterised sample.
    """
    s = config.slope
    dims = config.latent_dims
    L = len(dims)
    zs, lvs = [], []
    parent = x
    for j, d in enumerate(dims):
        out = _np_mlp(arrays, f"omega.enc{j}.", parent, s)
        mean, lv = out[:, :d], np.clip(out[:, d:], LOG_VAR_MIN, LOG_VAR_MAX)
        z = mean + np.exp(0.5 * lv) * noise[j]
        zs.append(z)
        lvs.append((mean, lv))
        parent = z
    g = _np_mlp(arrays, "beta0.net.", zs[0], s)
    sig2 = config.sigma ** 2
    total = -np.sum((x - g) ** 2, axis=1) / (2 * sig2) - 0.5 * x.shape[1] * np.log(2 * np.pi * sig2)
    for i in range(L - 1):
        out = _np_mlp(arrays, f"beta.{i}.net.", zs[i + 1], s)
        mean, lv = out[:, :dims[i]], np.clip(out[:, dims[i]:], LOG_VAR_MIN, LOG_VAR_MAX)
        total = total + _np_gauss(zs[i], mean, lv)
        total = total + 0.5 * np.sum(np.log(2 * np.pi) + 1.0 + lvs[i][1], axis=1)
    m, lv = lvs[-1]
    total = total - 0.5 * np.sum(np.exp(lv) + m ** 2 - 1.0 - lv, axis=1)
    return float(np.mean(total))


def elbo_oracle(seed: int = 0, batch: int = 4, corrupt: bool = False) -> dict[str, float]:
    """(beta0, beta, omega) updates of one plain-SGD variational step (unit rates,
    zero energies, alpha frozen) against central differences of
    :func:`numpy_elbo` at the same inference noise; worst error per group."""
    model = toy_model([1, 1], data_dim=2, hidden=5, seed=seed)
    model.zero_energies()
    x = np.random.default_rng([seed, 5]).standard_normal((batch, 2))
    rng = np.random.default_rng([seed, 6])
    replay = copy.deepcopy(rng)
    noise = [replay.standard_normal((batch, d)) for d in model.prior.dims]
    groups = ("beta0", "beta", "omega")
    cfg = TrainerConfig(optimizer="sgd", lr_beta=1.0, lr_omega=1.0, batch_size=batch)
    before = model.arrays()
    variational_step(model, x, cfg, rng, groups=groups)
    after = model.arrays()
    errs: dict[str, float] = {}
    for name in before:
        group = name.split(".", 1)[0]
        if group not in groups:
            continue

        def fn(p, name=name):
            return numpy_elbo({**before, name: p}, model.config, x, noise)

        fd = fd_gradient(fn, before[name], h=1e-4)
        g = (after[name] - before[name]) * (1.01 if corrupt else 1.0)
        errs[group] = max(errs.get(group, 0.0), rel_err(g, fd))
    return errs


# --------------------------------------------------------------------------

def langevin_variance(precision: float, step_size: float, steps: int, v0: float = 1.0) -> float:
    """Per-coordinate variance after ``steps`` unadjusted Langevin steps on a
    Gaussian target with the given precision, started from variance ``v0``.

    Each step maps v to (1 - s p)^2 v + 2 s; the fixed point is 2 / (p (2 - s p)).
    """
    a = (1.0 - step_size * precision) ** 2
    v = float(v0)
    for _ in range(steps):
        v = a * v + 2.0 * step_size
    return v


# --------------------------------------------------------------------------

def run_suite(latent_dims: Sequence[int] = (2, 2), seed: int = 0, corrupt: bool = False,
              n_samples: int = 100_000) -> tuple[bool, list[tuple[str, float, float]]]:
    """All oracles; returns (all passed, [(name, error, tolerance)])."""
    rows = [(f"fd:{k}", v, OP_TOL) for k, v in check_operations(latent_dims, seed, corrupt=corrupt).items()]
    if list(latent_dims) == [1, 1]:
        rows += [(f"quadrature:{k}", v, QUAD_TOL)
                 for k, v in quadrature_identity(seed, n_samples=n_samples, corrupt=corrupt).items()]
        rows += [(f"elbo:{k}", v, ELBO_TOL) for k, v in elbo_oracle(seed, corrupt=corrupt).items()]
    ok = all(np.isfinite(e) and e < tol for _, e, tol in rows)
    return ok, rows
