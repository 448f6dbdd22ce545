"""End-to-end acceptance checks, one test per numbered criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the
pytest terminal summary. Run just these with ``pytest -m slow -s``.
"""
import json
import time

import numpy as np
import pytest
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from jointebm import checks as C
from jointebm import cli
from jointebm import evaluation as E
from jointebm import model as M
from jointebm import samplers as S
from jointebm.data import gen_mixture, grid_centers
from jointebm.model import LatentEbm, ModelConfig
from jointebm.rng import stream
from jointebm.samplers import LangevinConfig
from jointebm.training import Trainer, TrainerConfig

pytestmark = pytest.mark.slow

PRIOR_K40 = LangevinConfig(steps=40, step_size=0.1, space="epsilon")
TWO_MODES = [[-2.0, 0.0], [2.0, 0.0]]


def mlp_model(hidden, seed):
    return LatentEbm(ModelConfig(data_dim=2, latent_dims=[2, 2], energy_hidden=[hidden] * 2,
                                 cond_hidden=[hidden] * 2, dec_hidden=[hidden] * 2, enc_hidden=[hidden] * 2,
                                 dtype="float64", init_seed=seed))


@pytest.fixture(scope="module")
def toy():
    """Two-layer model with 2-d latents trained on a two-mode mixture."""
    t0 = time.perf_counter()
    ds = gen_mixture(2000, TWO_MODES, 0.3, stream(0, "data"))
    m = mlp_model(64, 0)
    cfg = TrainerConfig(mode="variational", iterations=3000, batch_size=100, lr_alpha=3e-4, lr_beta=1e-3,
                        lr_omega=1e-3, seed=0, persistent_prior=True, prior_sampler=PRIOR_K40)
    Trainer(m, cfg).fit(ds.flat())
    return m, ds.flat(), time.perf_counter() - t0


def test_c01_operation_gradients(criterion):
    t0 = time.perf_counter()
    errs = C.check_operations((2, 2), seed=0, n_points=20)
    errs3 = C.check_operations((1, 3, 2), seed=1, n_points=20)
    worst = max(max(errs.values()), max(errs3.values()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 60
    assert criterion(1, "finite-difference gradients", ok,
                     f"max rel err {worst:.2e} over {len(errs)} operations (tol 1e-6), {dt:.1f}s (limit 60s)")


def test_c02_learning_gradient_vs_quadrature(criterion):
    t0 = time.perf_counter()
    errs = {}
    for seed in (0, 1):
        errs.update({f"seed{seed}:{k}": v for k, v in C.quadrature_identity(seed, n_samples=100_000).items()})
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-2 and dt < 300
    assert criterion(2, "learning gradient vs quadrature", ok,
                     f"max rel err {worst:.2e} (tol 1e-2) over {len(errs)} probes, {dt:.1f}s (limit 300s)"), errs


def test_c03_langevin_fixed_point(criterion):
    t0 = time.perf_counter()
    cfg = LangevinConfig(steps=2000, step_size=0.1)
    worst = 0.0
    # precision 1 is the standard normal; tilting it by exp(-0.75 |z|^2) gives precision 2.5
    for seed, precision in ((0, 1.0), (1, 2.5)):
        z0 = [np.random.default_rng([seed, 0]).standard_normal((10_000, 2))]
        z, _ = S.langevin(lambda z, p=precision: [-p * a for a in z], z0, cfg, np.random.default_rng([seed, 1]))
        expected = C.langevin_variance(precision, 0.1, 2000)
        worst = max(worst, float(np.abs(z[0].var(axis=0) - expected).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 0.05 and dt < 120
    assert criterion(3, "Langevin fixed-point variance", ok,
                     f"max |var - oracle| {worst:.4f} (tol 0.05), {dt:.1f}s (limit 120s)")


def test_c04_factorization(criterion):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(i)
        dims = rng.integers(1, 4, size=rng.integers(1, 5)).tolist()
        m = C.toy_model(dims, seed=i)
        z = [rng.standard_normal((5, d)) for d in dims]
        joint = m.prior.unnormalized_log_prob(z).data
        layered = sum(t.data for t in m.prior.tilted_factors(z))
        worst = max(worst, float(np.abs(joint - layered).max()))
    assert criterion(4, "layer-wise factorization", worst <= 1e-12,
                     f"max |difference| {worst:.1e} over 100 models (tol 1e-12)")


def test_c05_gaussian_reduction(criterion):
    exact = True
    for seed in range(5):
        m = LatentEbm(ModelConfig(data_dim=3, latent_dims=[2, 3, 2], energy_hidden=[6], cond_hidden=[6],
                                  dec_hidden=[6], enc_hidden=[6], dtype="float64", init_seed=seed))
        z = [np.random.default_rng(seed).standard_normal((8, d)) for d in m.prior.dims]
        exact &= np.array_equal(M.unnormalized_log_prior(m.prior, z).data, M.gaussian_prior_logpdf(m.prior, z).data)
    worst = max(max(C.elbo_oracle(seed).values()) for seed in range(3))
    ok = bool(exact) and worst < 1e-6
    assert criterion(5, "Gaussian reduction", ok,
                     f"log prior identity exact={exact}; ELBO gradient max rel err {worst:.2e} (tol 1e-6)")


def data_moments(m, space, step_size, steps, seed, n=10_000):
    cfg = LangevinConfig(steps=steps, step_size=step_size, space=space)
    z, _ = S.sample_prior(m.prior, n, cfg, np.random.default_rng(seed))
    x = m.decoder.mean(m.tensor(z[0])).data
    second = (x[:, :, None] * x[:, None, :]).mean(axis=0)[np.triu_indices(2)]
    return np.r_[x.mean(axis=0), second]


def test_c06_epsilon_and_latent_space_agree(toy, criterion):
    m, _, _ = toy
    # latent-space chains are stiff at the toy's small conditional variances, so they take smaller steps
    diff = float(np.abs(data_moments(m, "epsilon", 0.1, 40, 1) - data_moments(m, "z", 0.01, 400, 1)).max())
    eps = [np.random.default_rng(2).standard_normal((1000, d)) for d in m.prior.dims]
    back = S.epsilon_inverse(m.prior, S.epsilon_transform(m.prior, eps))
    trip = max(float(np.abs(a - b).max()) for a, b in zip(eps, back))
    ok = diff <= 0.05 and trip < 1e-10
    assert criterion(6, "noise-space vs latent-space sampling", ok,
                     f"max moment diff {diff:.4f} (tol 0.05); round trip {trip:.1e} (tol 1e-10)")


def two_means(z):
    labels = KMeans(2, n_init=10, random_state=0).fit(z).labels_
    return silhouette_score(z, labels), np.bincount(labels, minlength=2) / len(z)


def test_c07_prior_clusters(toy, criterion):
    m, _, train_time = toy
    t0 = time.perf_counter()
    z, _ = S.sample_prior(m.prior, 2000, PRIOR_K40, np.random.default_rng(5))
    sil, frac = two_means(z[-1])
    ablated = m.copy()
    ablated.zero_energies()
    z0, _ = S.sample_prior(ablated.prior, 2000, PRIOR_K40, np.random.default_rng(5))
    sil0, _ = two_means(z0[-1])
    dt = train_time + time.perf_counter() - t0
    ok = sil >= 0.4 and frac.min() >= 0.3 and frac.max() <= 0.7 and sil0 < 0.4 and dt < 600
    assert criterion(7, "prior clusters vs Gaussian ablation", ok,
                     f"top-layer silhouette {sil:.3f} fractions {np.round(frac, 3).tolist()}; "
                     f"ablation silhouette {sil0:.3f} (threshold 0.4); {dt:.0f}s incl. training (limit 600s)")


def detection_run(seed, held=5, it1=1500, it2=1000, n_mc=64):
    centers = grid_centers(10, 4.0)
    full = gen_mixture(3000, centers, 0.3, stream(seed, "data"))
    train = full.subset(full.labels != held).flat()
    test = gen_mixture(2000, centers, 0.3, stream(seed, "test"))
    m = mlp_model(32, seed)
    cfg = TrainerConfig(mode="two_stage", iterations=it1 + it2, stage1_iterations=it1, batch_size=100,
                        lr_alpha=1e-4, lr_beta=1e-3, lr_omega=1e-3, seed=seed, persistent_prior=True,
                        prior_sampler=PRIOR_K40)
    snap = {}
    # the first stage leaves every energy head at zero: that checkpoint is the Gaussian-prior baseline
    Trainer(m, cfg).fit(train, callback=lambda t, _: snap.setdefault("base", t.model.copy())
                        if t.iteration == it1 else None)
    x, anom = test.flat(), test.labels == held
    ebm = E.hierarchical_scores(m, x, [0, 2], n_mc, rng=stream(seed, "score"))
    base = E.hierarchical_scores(snap["base"], x, [0], 1, rng=stream(seed, "score"))
    llr = ebm[0] - ebm[2]
    # low scores flag anomalies
    return {"auprc_ebm": E.auprc(-ebm[0][anom], -ebm[0][~anom]),
            "auprc_base": E.auprc(-base[0][anom], -base[0][~anom]),
            "auroc_l0": E.auroc(-ebm[0][anom], -ebm[0][~anom]),
            "auroc_llr": E.auroc(-llr[anom], -llr[~anom])}


def test_c08_detection(criterion):
    t0 = time.perf_counter()
    runs = [detection_run(seed) for seed in range(5)]
    dt = time.perf_counter() - t0
    gap = float(np.mean([r["auprc_ebm"] - r["auprc_base"] for r in runs]))
    au0 = float(np.mean([r["auroc_l0"] for r in runs]))
    aullr = float(np.mean([r["auroc_llr"] for r in runs]))
    ok = gap >= 0.05 and aullr >= au0 - 0.02 and dt < 900
    assert criterion(8, "held-out cluster detection", ok,
                     f"mean AUPRC gap {gap:.3f} (need >= 0.05); AUROC L0 {au0:.3f} vs LLR {aullr:.3f}; "
                     f"{dt:.0f}s (limit 900s)"), runs


def test_c09_long_run_stability(toy, criterion):
    m, x, _ = toy
    prof = E.energy_profile(m, 1000, 2500, PRIOR_K40, np.random.default_rng(3))
    window = prof.mean_trace[-1500:]
    slope = abs(E.trace_slope(window))
    bound = 0.1 * float(prof.energy[-1500:].std()) / 1500
    literal = 0.1 * float(window.std()) / 1500
    samples = m.decoder.mean(m.tensor(prof.z[0])).data
    xmax, dmax = float(np.abs(samples).max()), float(np.abs(x).max())
    finite = bool(np.isfinite(prof.energy).all())
    ok = slope < bound and finite and xmax < 3 * dmax
    assert criterion(9, "long-run prior chain stability", ok,
                     f"|slope| {slope:.2e} < {bound:.2e} (pooled std bound; mean-trace std bound {literal:.2e}); "
                     f"finite={finite}; sample max {xmax:.2f} < 3 x {dmax:.2f}")


ABLATION_CONFIG = """
schema_version = 1

[model]
latent_dims = [2, 2]
energy_hidden = [32, 32]
cond_hidden = [32, 32]
dec_hidden = [32, 32]
enc_hidden = [32, 32]
dtype = "float64"

[prior_sampler]
steps = 40
step_size = 0.1
space = "epsilon"

[trainer]
mode = "variational"
iterations = 1500
batch_size = 100
lr_alpha = 3e-4
lr_beta = 1e-3
lr_omega = 1e-3
adam_beta1 = 0.5
energy_l2 = 0.01
log_every = 100

[data]
generator = "mixture"
n = 2000
centers = [[-2.0, 0.0], [2.0, 0.0]]
std = 0.3
"""


def test_c10_prior_step_ablation(tmp_path, criterion):
    (tmp_path / "abl.toml").write_text(ABLATION_CONFIG)
    repeats = 3
    code = cli.main(["ablate-steps", "--config", str(tmp_path / "abl.toml"), "--ks", "10,20,40,80",
                     "--repeats", str(repeats), "--out", str(tmp_path / "abl")])
    results = json.loads((tmp_path / "abl" / "ablation.json").read_text())["results"]
    cov = {r["k"]: r["coverage"] for r in results}
    var = {r["k"]: np.var(r["coverage_runs"], ddof=1) for r in results}

    def noise(a, b):
        # two standard errors of the difference of two replicate means
        return 2 * np.sqrt((var[a] + var[b]) / repeats)

    ks = sorted(cov)
    monotone = all(cov[b] >= cov[a] - noise(a, b) for a, b in zip(ks, ks[1:]))
    plateau = abs(cov[40] - cov[80]) <= noise(40, 80)
    ok = code == 0 and monotone and plateau
    assert criterion(10, "prior-step ablation", ok,
                     f"coverage {[round(cov[k], 3) for k in ks]} at k={ks}; |k40-k80| {abs(cov[40] - cov[80]):.3f} "
                     f"vs noise {noise(40, 80):.3f}; "
                     f"monotone={monotone} plateau={plateau}; k80-k10 {cov[80] - cov[10]:+.3f}")


CLI_CONFIG = """
schema_version = 1

[model]
latent_dims = [2, 2]
energy_hidden = [16]
cond_hidden = [16]
dec_hidden = [16]
enc_hidden = [16]
dtype = "float64"

[prior_sampler]
steps = 10
space = "epsilon"

[trainer]
iterations = 20
batch_size = 50
lr_alpha = 1e-3
lr_beta = 1e-3
lr_omega = 1e-3
log_every = 5
checkpoint_every = 10

[data]
generator = "mixture"
n = 500
centers = [[-2.0, 0.0], [2.0, 0.0]]
std = 0.3
"""

CLOCK_FIELDS = ("wall_ms", "started", "finished")


def snapshot(root):
    """Bytes of every file under ``root`` with wall-clock fields removed."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        raw = p.read_bytes()
        if p.suffix == ".jsonl":
            rows = [json.loads(ln) for ln in raw.decode().splitlines()]
            raw = json.dumps([{k: v for k, v in r.items() if k not in CLOCK_FIELDS} for r in rows]).encode()
        elif p.name == "run_manifest.json":
            raw = json.dumps({k: v for k, v in json.loads(raw).items() if k not in CLOCK_FIELDS}).encode()
        out[str(p.relative_to(root))] = raw
    return out


def test_c11_cli_determinism(tmp_path, criterion):
    (tmp_path / "run.toml").write_text(CLI_CONFIG)
    work = tmp_path / "work"
    commands = {
        "train": ["train", "--config", tmp_path / "run.toml", "--out", work / "train"],
        "sample": ["sample", "--ckpt", work / "train" / "checkpoints" / "final", "--n", 200,
                   "--out", work / "sample" / "s.ebmd", "--seed", 7],
        "eval-ood": ["eval-ood", "--ckpt", work / "train" / "checkpoints" / "final",
                     "--in-data", tmp_path / "in.ebmd", "--out-data", tmp_path / "out.ebmd", "--k", 2,
                     "--n-mc", 2, "--report", work / "ood" / "r.json", "--seed", 3],
    }
    cli.main(["gen-data", "--n", "300", "--centers=-2,0;2,0", "--out", str(tmp_path / "in.ebmd"), "--seed", "1"])
    cli.main(["gen-data", "--n", "300", "--centers=0,3", "--out", str(tmp_path / "out.ebmd"), "--seed", "2"])
    runs = []
    for _ in range(2):
        codes = {}
        for name, argv in commands.items():
            codes[name] = cli.main([str(a) for a in argv])
        runs.append((codes, snapshot(work)))
        for p in sorted(work.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    (codes_a, files_a), (codes_b, files_b) = runs
    differ = sorted(k for k in set(files_a) | set(files_b) if files_a.get(k) != files_b.get(k))
    ok = all(c == 0 for c in codes_a.values()) and codes_a == codes_b and not differ and len(files_a) > 0
    assert criterion(11, "CLI determinism", ok,
                     f"exit codes {codes_a}; {len(files_a)} files compared, {len(differ)} differ {differ[:3]}")
