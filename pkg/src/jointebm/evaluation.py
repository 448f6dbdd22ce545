"""Hierarchical scoring, detection metrics and long-run sampler diagnostics.

Layer cut-offs ``k`` count from the bottom: ``k = 0`` keeps every inferred
layer, ``k = L`` replaces all of them with prior draws. Internally layers
``0..k-1`` (0-based) are resampled and ``k..L-1`` are held at their inferred
values.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .model import LatentEbm
from .samplers import LangevinConfig, conditional_prior_langevin, sample_prior
from .tensor import Tensor

__all__ = [
    "OodScore", "DetectionReport", "EnergyProfile", "hierarchical_scores", "ood_score", "llr_score",
    "anomaly_score",
    "auroc", "auprc", "fpr80", "detection_report", "hierarchical_sample", "hierarchical_reconstruct",
    "energy_profile", "trace_slope", "mode_coverage", "write_scores_csv",
]

CHUNK = 256
DEFAULT_SAMPLER = LangevinConfig(steps=40, step_size=0.1, space="epsilon")


class OodScore(NamedTuple):
    k: int
    values: np.ndarray
    n_mc: int

    @property
    def value(self) -> float:
        return float(np.mean(self.values))


# --------------------------------------------------------------------------
# decision functions

def _check_k(model: LatentEbm, k: int) -> None:
    if not 0 <= k <= model.n_layers:
        raise ValueError(f"k must lie in [0, {model.n_layers}], got {k}")


def _log_joint(model: LatentEbm, x: np.ndarray, z: Sequence[np.ndarray]) -> np.ndarray:
    zt = model.prior.as_stack(z)
    ll = model.decoder.log_likelihood(model.tensor(x), zt[0]).data
    return ll + model.prior.unnormalized_log_prob(zt).data


def _resample_below(model: LatentEbm, z: Sequence[np.ndarray], k: int, cfg: LangevinConfig,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """Redraw layers 0..k-1 from the prior conditioned on layers k..L-1."""
    if k == 0:
        return [np.array(a) for a in z]
    n = z[0].shape[0]
    fixed = {i: np.asarray(z[i]) for i in range(k, model.n_layers)}
    eps = [rng.standard_normal((n, d)).astype(model.dtype) if i < k else None
           for i, d in enumerate(model.prior.dims)]
    start = [t.data.copy() for t in model.prior.epsilon_transform(eps, fixed)]
    out, _ = conditional_prior_langevin(model.prior, sorted(fixed), start, cfg, rng)
    return out


def _chunk_scores(model, x, ks, n_mc, cfg, seeds, stochastic):
    out = {k: np.zeros(x.shape[0]) for k in ks}
    for r in range(n_mc):
        rng = np.random.Generator(np.random.PCG64(seeds[r]))
        inf = model.encoder.infer(model.tensor(x), rng=rng, deterministic=not stochastic)
        z = [t.data for t in inf.z]
        for k in ks:
            out[k] += _log_joint(model, x, _resample_below(model, z, k, cfg, rng))
    return {k: v / n_mc for k, v in out.items()}


def hierarchical_scores(model: LatentEbm, x, ks, n_mc: int = 4, cfg: LangevinConfig = DEFAULT_SAMPLER,
                        rng: np.random.Generator | None = None, stochastic: bool = False,
                        threads: int = 1) -> dict[int, np.ndarray]:
    """Per-example L^{>k} for every ``k`` in ``ks`` with inferred codes shared across ``ks``.

    Examples are split into fixed-size chunks with their own seed sequences, so
    the result does not depend on ``threads``.
    """
    if model.encoder is None:
        raise ValueError("scoring needs an inference stack")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    for k in ks:
        _check_k(model, k)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.atleast_2d(np.asarray(x, dtype=model.dtype))
    root = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
    starts = list(range(0, x.shape[0], CHUNK))
    seeds = root.spawn(len(starts))

    def work(c):
        lo = starts[c]
        return _chunk_scores(model, x[lo:lo + CHUNK], ks, n_mc, cfg, seeds[c].spawn(n_mc), stochastic)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(len(starts))))
    else:
        parts = [work(c) for c in range(len(starts))]
    if not parts:
        return {k: np.zeros(0) for k in ks}
    return {k: np.concatenate([p[k] for p in parts]) for k in ks}


def ood_score(model: LatentEbm, x, k: int, n_mc: int = 4, sampler_cfg: LangevinConfig = DEFAULT_SAMPLER,
              rng: np.random.Generator | None = None, stochastic: bool = False, threads: int = 1) -> OodScore:
    """L^{>k}: mean over ``n_mc`` replicates of log p(x|z) + log p_beta(z) + sum f(z).

    Codes come from the inference mean path unless ``stochastic``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    return OodScore(k, hierarchical_scores(model, x, [k], n_mc, sampler_cfg, rng, stochastic, threads)[k], n_mc)


def llr_score(model: LatentEbm, x, k: int, n_mc: int = 4, sampler_cfg: LangevinConfig = DEFAULT_SAMPLER,
              rng: np.random.Generator | None = None, stochastic: bool = False, threads: int = 1) -> np.ndarray:
    """L^{>0} - L^{>k} per example, both terms using the same inferred codes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    _check_k(model, k)
    if k == 0:
        return np.zeros(np.atleast_2d(x).shape[0])
    s = hierarchical_scores(model, x, [0, k], n_mc, sampler_cfg, rng, stochastic, threads)
    return s[0] - s[k]


def anomaly_score(model: LatentEbm, x, n_mc: int = 1, rng: np.random.Generator | None = None,
                  stochastic: bool = False, threads: int = 1) -> np.ndarray:
    """L^{>0}; higher means more normal."""
    return ood_score(model, x, 0, n_mc, DEFAULT_SAMPLER, rng, stochastic, threads).values


# --------------------------------------------------------------------------
# metrics

def _pair(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be non-empty")
    return pos, neg


def auroc(pos_scores, neg_scores) -> float:
    """P(pos > neg) + P(pos = neg) / 2 from the rank-sum statistic."""
    pos, neg = _pair(pos_scores, neg_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def _curve(pos, neg):
    """Cumulative (tp, fp) at each distinct threshold, highest threshold first."""
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), scores.size - 1]
    tp = np.cumsum(labels)[last]
    fp = (last + 1) - tp
    return tp, fp


def auprc(pos_scores, neg_scores) -> float:
    """Average precision: sum over thresholds of (recall step) * precision."""
    pos, neg = _pair(pos_scores, neg_scores)
    tp, fp = _curve(pos, neg)
    precision = tp / (tp + fp)
    recall = tp / pos.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr80(pos_scores, neg_scores) -> float:
    """False-positive rate at the highest threshold whose true-positive rate is >= 0.8."""
    pos, neg = _pair(pos_scores, neg_scores)
    tp, fp = _curve(pos, neg)
    idx = np.flatnonzero(tp / pos.size >= 0.8 - 1e-12)[0]
    return float(fp[idx] / neg.size)


@dataclass
class DetectionReport:
    auroc: float
    auprc: float
    fpr80: float
    positive: str
    n_pos: int
    n_neg: int
    bin_edges: list[float] = field(default_factory=list)
    hist_pos: list[int] = field(default_factory=list)
    hist_neg: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def detection_report(pos_scores, neg_scores, positive: str, bins: int = 20, extra: dict | None = None
                     ) -> DetectionReport:
    """All metrics from one pair of score vectors, plus shared-bin histograms."""
    pos, neg = _pair(pos_scores, neg_scores)
    edges = np.histogram_bin_edges(np.concatenate([pos, neg]), bins=bins)
    return DetectionReport(
        auroc=auroc(pos, neg), auprc=auprc(pos, neg), fpr80=fpr80(pos, neg), positive=positive,
        n_pos=int(pos.size), n_neg=int(neg.size), bin_edges=[float(e) for e in edges],
        hist_pos=np.histogram(pos, edges)[0].tolist(), hist_neg=np.histogram(neg, edges)[0].tolist(),
        extra=dict(extra or {}),
    )


def write_scores_csv(path, rows: Sequence[tuple]) -> None:
    """Rows of (id, label, k, score, score_type)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "k", "score", "score_type"])
        for i, label, k, score, kind in rows:
            w.writerow([int(i), label, int(k), repr(float(score)), kind])


# --------------------------------------------------------------------------
# hierarchical sampling

def _decode(model: LatentEbm, z1: np.ndarray) -> np.ndarray:
    return model.decoder.mean(Tensor(np.asarray(z1), dtype=model.dtype)).data.copy()


def hierarchical_sample(model: LatentEbm, base_z: Sequence[np.ndarray], resample_layers: Sequence[int],
                        n_variants: int, sampler_cfg: LangevinConfig = DEFAULT_SAMPLER,
                        rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Decode ``n_variants`` copies of ``base_z`` with the listed (0-based) layers redrawn.

    Returns data of shape (n_variants, n, data_dim) and the latent stacks,
    each layer shaped (n_variants, n, d_i).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    base = [np.atleast_2d(np.asarray(a, dtype=model.dtype)) for a in base_z]
    resample = sorted(set(resample_layers))
    if any(i < 0 or i >= model.n_layers for i in resample):
        raise ValueError(f"layer indices must lie in [0, {model.n_layers})")
    n = base[0].shape[0]
    z = [np.tile(a, (n_variants, 1)) for a in base]
    if resample:
        fixed = {i: z[i] for i in range(model.n_layers) if i not in resample}
        eps = [rng.standard_normal((z[i].shape[0], d)).astype(model.dtype) if i in resample else None
               for i, d in enumerate(model.prior.dims)]
        start = [t.data.copy() for t in model.prior.epsilon_transform(eps, fixed)]
        z, _ = conditional_prior_langevin(model.prior, sorted(fixed), start, sampler_cfg, rng)
    x = _decode(model, z[0]) if z[0].shape[0] else np.empty((0, model.decoder.data_dim), model.dtype)
    return x.reshape(n_variants, n, -1), [a.reshape(n_variants, n, -1) for a in z]


def hierarchical_reconstruct(model: LatentEbm, x, k: int, sampler_cfg: LangevinConfig = DEFAULT_SAMPLER,
                             rng: np.random.Generator | None = None) -> np.ndarray:
    """Infer the code stack, redraw layers below the cut-off from the conditional prior, decode."""
    _check_k(model, k)
    rng = rng if rng is not None else np.random.default_rng(0)
    inf = model.encoder.infer(model.tensor(x), deterministic=True)
    z = _resample_below(model, [t.data for t in inf.z], k, sampler_cfg, rng)
    return _decode(model, z[0])


# --------------------------------------------------------------------------
# long-run diagnostics

class EnergyProfile(NamedTuple):
    energy: np.ndarray       # (steps+1, chains) of -sum f
    log_target: np.ndarray   # (steps+1, chains) sampler target
    z: list[np.ndarray]

    @property
    def mean_trace(self) -> np.ndarray:
        return self.energy.mean(axis=1)


def energy_profile(model: LatentEbm, n_chains: int, k_long: int, sampler_cfg: LangevinConfig = DEFAULT_SAMPLER,
                   rng: np.random.Generator | None = None) -> EnergyProfile:
    """Run prior Langevin for ``k_long`` steps recording the energy at every state."""
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = LangevinConfig(**{**asdict(sampler_cfg), "steps": k_long})
    z, record = sample_prior(model.prior, n_chains, cfg, rng, record_every=max(k_long, 1))
    log_target, energy = record.values()
    return EnergyProfile(energy, log_target, z)


def trace_slope(trace: np.ndarray) -> float:
    """Least-squares slope per step of a 1-D trace."""
    trace = np.asarray(trace, dtype=np.float64)
    t = np.arange(trace.size, dtype=np.float64)
    return float(np.polyfit(t, trace, 1)[0])


def mode_coverage(samples: np.ndarray, centers: np.ndarray, std: float, radius: float = 3.0) -> dict:
    """Coverage of a mixture's modes by generated samples.

    A sample belongs to its nearest center when within ``radius * std``.
    ``coverage`` is the mean over modes of min(1, n_m / (N / M)).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    m = centers.shape[0]
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    on_mode = np.sqrt(d2[np.arange(samples.shape[0]), nearest]) <= radius * std
    counts = np.bincount(nearest[on_mode], minlength=m)
    fair = samples.shape[0] / m if samples.shape[0] else 1.0
    return {
        "coverage": float(np.mean(np.minimum(1.0, counts / fair))),
        "on_mode_fraction": float(on_mode.mean()) if samples.shape[0] else 0.0,
        "counts": counts.tolist(),
    }
