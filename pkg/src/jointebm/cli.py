"""Command-line entry point: ``jointebm <subcommand> ...``.

Exit codes: 0 success, 1 check or metric failure, 2 usage/config/IO error,
3 sampler divergence or non-finite values.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .data import (Dataset, DatasetFormatError, gen_mixture, gen_pinwheel, gen_rings, grid_centers,
                   load_dataset, save_dataset, write_image_grid)
from .model import CheckpointError, LatentEbm, ModelConfig, load_checkpoint
from .rng import stream
from .samplers import DivergedChainError, LangevinConfig, export_chain_csv, sample_prior
from .tensor import NonFiniteError, Tensor
from .training import Trainer, TrainerConfig

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SECTIONS = ("model", "prior_sampler", "posterior_sampler", "trainer", "data")


class UsageError(Exception):
    """Invalid arguments or configuration (exit code 2)."""


# --------------------------------------------------------------------------
# config

def parse_config_text(text: str, source: str = "<config>") -> dict:
    try:
        cfg = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{source}: malformed TOML: {exc}") from None
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UsageError(f"{source}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(cfg) - set(SECTIONS) - {"schema_version"}
    if unknown:
        raise UsageError(f"{source}: unknown sections {sorted(unknown)}")
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    cfg = parse_config_text(text, str(path))
    cfg["_base"] = str(Path(path).resolve().parent)
    return cfg


def _build(cls, section: dict, name: str, **extra):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise UsageError(f"[{name}] unknown keys {sorted(unknown)}")
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[{name}] {exc}") from None


def sampler_config(cfg: dict, name: str, default: LangevinConfig) -> LangevinConfig:
    return _build(LangevinConfig, {**asdict(default), **cfg.get(name, {})}, name)


def trainer_config(cfg: dict, seed: int | None = None) -> TrainerConfig:
    section = dict(cfg.get("trainer", {}))
    if seed is not None:
        section["seed"] = seed
    prior = sampler_config(cfg, "prior_sampler", LangevinConfig())
    post = sampler_config(cfg, "posterior_sampler", LangevinConfig(steps=20))
    return _build(TrainerConfig, section, "trainer", prior_sampler=prior, posterior_sampler=post)


def dataset_from_config(section: dict, base: str | None = None) -> Dataset:
    """``[data]`` is either ``path = ...`` or a generator description."""
    section = dict(section)
    exclude = section.pop("exclude_labels", [])
    if "path" in section:
        path = Path(section["path"])
        if base is not None and not path.is_absolute():
            path = Path(base) / path
        ds = _load_data(path)
    else:
        kind = section.get("generator")
        rng = stream(section.get("seed", 0), "data")
        n = int(section.get("n", 1000))
        if kind == "mixture":
            centers = section.get("centers")
            if centers is None:
                centers = grid_centers(int(section.get("n_centers", 2)), float(section.get("spacing", 4.0)))
            ds = gen_mixture(n, centers, float(section.get("std", 0.3)), rng)
        elif kind == "pinwheel":
            ds = gen_pinwheel(n, int(section.get("arms", 5)), rng)
        elif kind == "rings":
            ds = gen_rings(n, section.get("radii", [1.0, 2.0]), rng)
        else:
            raise UsageError(f"[data] needs 'path' or generator in mixture|pinwheel|rings, got {kind!r}")
    if exclude:
        if ds.labels is None:
            raise UsageError("[data] exclude_labels needs a labelled dataset")
        ds = ds.subset(~np.isin(ds.labels, exclude))
    return ds


def _load_data(path) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True, default=str).encode()).hexdigest()


# --------------------------------------------------------------------------
# run manifest

def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    os.replace(tmp, path)


class RunManifest:
    """run_manifest.json in the output directory, rewritten on completion."""

    def __init__(self, out: Path, command: str, config: dict, seed: int, outputs: dict):
        self.path = out / "run_manifest.json"
        self.data = {
            "command": command,
            "version": __version__,
            "config": {k: v for k, v in config.items() if not k.startswith("_")},
            "config_hash": config_hash(config),
            "seed": seed,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            "outputs": outputs,
        }
        _write_json_atomic(self.path, self.data)

    def finish(self, status: str = "ok", **outputs) -> None:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["status"] = status
        self.data["outputs"].update(outputs)
        _write_json_atomic(self.path, self.data)


# --------------------------------------------------------------------------
# subcommands

def build_model(cfg: dict, data_dim: int, seed: int) -> LatentEbm:
    section = dict(cfg.get("model", {}))
    section.setdefault("data_dim", data_dim)
    section.setdefault("init_seed", seed)
    if section["data_dim"] != data_dim:
        raise UsageError(f"[model] data_dim={section['data_dim']} but the data has dimension {data_dim}")
    if "latent_dims" not in section:
        raise UsageError("[model] latent_dims is required")
    try:
        return LatentEbm(ModelConfig.from_dict(section))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[model] {exc}") from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = trainer_config(cfg, args.seed)
    ds = dataset_from_config(cfg.get("data", {}), cfg["_base"])
    x = ds.flat()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "train", cfg, tcfg.seed,
                           {"metrics": str(out / "metrics.jsonl"), "checkpoints": str(out / "checkpoints")})
    if args.resume:
        trainer = Trainer.resume(args.resume, tcfg)
        if trainer.model.config.data_dim != x.shape[1]:
            raise UsageError("checkpoint and data dimensions differ")
    else:
        trainer = Trainer(build_model(cfg, x.shape[1], tcfg.seed), tcfg)
    try:
        trainer.fit(x, out_dir=out)
    except (DivergedChainError, NonFiniteError):
        manifest.finish("diverged")
        raise
    manifest.finish("ok", final_checkpoint=str(out / "checkpoints" / "final"), iterations=trainer.iteration)
    print(f"trained {trainer.iteration} iterations -> {out / 'checkpoints' / 'final'}")
    return EXIT_OK


def _sampler_from_args(args, default_steps: int = 40) -> LangevinConfig:
    steps = default_steps if getattr(args, "steps", None) is None else args.steps
    space = {"eps": "epsilon", "epsilon": "epsilon", "z": "z"}[getattr(args, "space", "epsilon")]
    return LangevinConfig(steps=steps, step_size=args.step_size, space=space)


def _decode(model: LatentEbm, z1: np.ndarray) -> np.ndarray:
    if z1.shape[0] == 0:
        return np.empty((0, model.config.data_dim), dtype=model.dtype)
    return model.decoder.mean(Tensor(z1, dtype=model.dtype)).data.copy()


def cmd_sample(args) -> int:
    model = _load_model(args.ckpt)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    cfg = _sampler_from_args(args)
    rng = stream(args.seed, "sample")
    record_every = args.thin if args.record_chains else None
    z, record = sample_prior(model.prior, args.n, cfg, rng, record_every=record_every)
    x = _decode(model, z[0])
    out = str(args.out)
    if out.endswith((".pgm", ".ppm")):
        if not args.image_shape:
            raise UsageError("--image-shape H,W[,3] is required for image output")
        shape = tuple(int(s) for s in args.image_shape.split(","))
        rows = args.rows or int(np.ceil(np.sqrt(max(args.n, 1))))
        cols = int(np.ceil(args.n / rows)) if args.n else 1
        imgs = x.reshape((args.n, *shape))
        pad = rows * cols - args.n
        if pad:
            imgs = np.concatenate([imgs, -np.ones((pad, *shape), dtype=imgs.dtype)])
        write_image_grid(imgs, rows, cols, out)
    else:
        save_dataset(Dataset(x.reshape(args.n, model.config.data_dim)), out)
    if args.record_chains:
        prefix = str(args.record_chains)
        export_chain_csv(record, prefix + "_states.csv", prefix + "_energy.csv")
    print(f"wrote {args.n} samples -> {out}")
    return EXIT_OK


def _load_model(path) -> LatentEbm:
    try:
        return load_checkpoint(path)[0]
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None


def _k_arg(model: LatentEbm, k: int) -> int:
    if not 0 <= k <= model.n_layers:
        raise UsageError(f"--k must lie in [0, {model.n_layers}] for this model, got {k}")
    return k


def cmd_eval_ood(args) -> int:
    from .evaluation import detection_report, hierarchical_scores, write_scores_csv

    model = _load_model(args.ckpt)
    k = _k_arg(model, args.k)
    if model.encoder is None:
        raise UsageError("OOD scoring needs a checkpoint with an inference stack")
    cfg = _sampler_from_args(args)
    x_in, x_out = _load_data(args.in_data).flat(), _load_data(args.out_data).flat()
    scores = {}
    for name, x in (("in", x_in), ("out", x_out)):
        s = hierarchical_scores(model, x, sorted({0, k}), args.n_mc, cfg, stream(args.seed, f"eval-ood/{name}"),
                                threads=args.threads)
        scores[name] = (s[k], s[0] - s[k])
    rows = []
    for name, label in (("in", "in"), ("out", "ood")):
        lk, llr = scores[name]
        rows += [(i, label, k, v, "L") for i, v in enumerate(lk)]
        rows += [(i, label, k, v, "LLR") for i, v in enumerate(llr)]
    report_path = Path(args.report)
    scores_path = Path(args.scores) if args.scores else report_path.with_suffix(".scores.csv")
    write_scores_csv(scores_path, rows)
    llr_report = detection_report(scores["in"][1], scores["out"][1], "in-distribution")
    report = detection_report(scores["in"][0], scores["out"][0], "in-distribution", extra={
        "score": "L", "k": k, "n_mc": args.n_mc, "direction": "higher score = in-distribution",
        "llr": {"auroc": llr_report.auroc, "auprc": llr_report.auprc, "fpr80": llr_report.fpr80},
    })
    report.save(report_path)
    print(f"AUROC {report.auroc:.4f}  AUPRC {report.auprc:.4f}  FPR80 {report.fpr80:.4f}  "
          f"(LLR AUROC {llr_report.auroc:.4f})")
    return EXIT_OK


def cmd_eval_ad(args) -> int:
    from .evaluation import detection_report, ood_score, write_scores_csv

    model = _load_model(args.ckpt)
    ds = _load_data(args.data)
    if ds.labels is None:
        raise UsageError("--data must carry labels for anomaly evaluation")
    x = ds.flat()
    is_anom = ds.labels == args.heldout_label
    if not is_anom.any() or is_anom.all():
        raise UsageError("held-out label must split the data into two non-empty groups")
    cfg = _sampler_from_args(args)
    score = ood_score(model, x, 0, args.n_mc, cfg, stream(args.seed, "eval-ad"), threads=args.threads).values
    # anomaly is the positive class, so rank by -L^{>0}
    anomaly = -score
    report = detection_report(anomaly[is_anom], anomaly[~is_anom], "anomaly", extra={
        "score": "-L", "k": 0, "heldout_label": args.heldout_label, "direction": "higher score = anomaly",
    })
    if args.scores:
        write_scores_csv(args.scores, [(i, int(l), 0, v, "anomaly") for i, (l, v) in
                                       enumerate(zip(ds.labels, anomaly))])
    report.save(args.report)
    print(f"AUPRC {report.auprc:.4f}  AUROC {report.auroc:.4f}  FPR80 {report.fpr80:.4f}")
    return EXIT_OK


def cmd_viz_latent(args) -> int:
    import csv

    model = _load_model(args.ckpt)
    if args.thin < 1 or args.steps < 0:
        raise UsageError("--thin must be >= 1 and --steps >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if any(d != 2 for d in model.prior.dims):
        print("warning: latent layers are not 2-D; emitting the first two coordinates", file=sys.stderr)
    ncoord = 2
    cfg = _sampler_from_args(args)
    z, record = sample_prior(model.prior, args.n_chains, cfg, stream(args.seed, "viz-latent"),
                             record_every=args.thin)

    def coords(row):
        vals = [repr(float(v)) for v in row[:ncoord]]
        return vals + [""] * (ncoord - len(vals))

    with open(out / "prior_chains.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "step", "layer", "z0", "z1"])
        for step, snap in zip(record.steps, record.snapshots):
            for layer, arr in enumerate(snap):
                for c in range(arr.shape[0]):
                    w.writerow([c, step, layer + 1, *coords(arr[c])])
    if args.data:
        ds = _load_data(args.data)
        x = ds.flat()
        if model.encoder is not None:
            codes = [t.data for t in model.encoder.infer(model.tensor(x), deterministic=True).z]
        else:
            from .samplers import sample_posterior
            codes, _ = sample_posterior(model.decoder, model.prior, x, LangevinConfig(steps=20),
                                        stream(args.seed, "viz-posterior"))
        with open(out / "posterior_codes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", "layer", "z0", "z1"])
            for layer, arr in enumerate(codes):
                for i in range(arr.shape[0]):
                    label = "" if ds.labels is None else int(ds.labels[i])
                    w.writerow([i, label, layer + 1, *coords(arr[i])])
    print(f"wrote {len(record.steps)} snapshots per layer -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    try:
        dims = [int(d) for d in args.dims.split(",")]
    except ValueError:
        raise UsageError(f"--dims expects comma-separated integers, got {args.dims!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise UsageError("--dims entries must be positive")
    ok, rows = run_suite(dims, args.seed, corrupt=args.inject_fault, n_samples=args.samples)
    for name, err, tol in rows:
        print(f"{'PASS' if err < tol else 'FAIL'}  {name:<48s} {err:.3e}  (tol {tol:.0e})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gen_data(args) -> int:
    rng = stream(args.seed, "data")
    if args.kind == "mixture":
        if args.centers:
            centers = [[float(v) for v in c.split(",")] for c in args.centers.split(";")]
        else:
            centers = grid_centers(args.n_centers, args.spacing)
        ds = gen_mixture(args.n, centers, args.std, rng)
    elif args.kind == "pinwheel":
        ds = gen_pinwheel(args.n, args.arms, rng)
    else:
        ds = gen_rings(args.n, [float(r) for r in args.radii.split(",")], rng)
    if args.exclude_label is not None:
        ds = ds.subset(ds.labels != args.exclude_label)
    if args.only_label is not None:
        ds = ds.subset(ds.labels == args.only_label)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} examples -> {args.out}")
    return EXIT_OK


def cmd_ablate_steps(args) -> int:
    from .evaluation import mode_coverage
    from .model import generate

    cfg = load_config(args.config)
    data = cfg.get("data", {})
    if data.get("generator") != "mixture":
        raise UsageError("ablate-steps needs a [data] mixture generator (centers define the modes)")
    ds = dataset_from_config(data, cfg["_base"])
    centers = np.asarray(data.get("centers") if data.get("centers") is not None else
                         grid_centers(int(data.get("n_centers", 2)), float(data.get("spacing", 4.0))))
    std = float(data.get("std", 0.3))
    ks = [int(k) for k in args.ks.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "ablate-steps", cfg, args.seed, {"results": str(out / "ablation.json")})
    results = []
    for k in ks:
        covs = []
        for r in range(args.repeats):
            seed = args.seed + r
            tcfg = trainer_config(cfg, seed)
            tcfg.prior_sampler = LangevinConfig(**{**asdict(tcfg.prior_sampler), "steps": k})
            model = build_model(cfg, ds.flat().shape[1], seed)
            Trainer(model, tcfg).fit(ds.flat())
            x, _, _ = generate(model.decoder, model.prior, args.n_samples, tcfg.prior_sampler,
                               stream(seed, "ablate-sample", k))
            covs.append(mode_coverage(x, centers, std)["coverage"])
        results.append({"k": k, "coverage": float(np.mean(covs)), "coverage_runs": covs})
        print(f"k={k:<4d} mode coverage {np.mean(covs):.4f}")
    _write_json_atomic(out / "ablation.json", {"results": results})
    manifest.finish("ok")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointebm", description="Latent-space joint EBM prior models.")
    p.add_argument("--version", action="version", version=f"jointebm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="root seed for all random streams (default 0)")
        sp.add_argument("--threads", type=int, default=1, help="maximum worker threads (default 1)")

    def sampler(sp, steps=40):
        sp.add_argument("--steps", type=int, default=steps, help=f"Langevin steps (default {steps})")
        sp.add_argument("--step-size", type=float, default=0.1, help="Langevin step size (default 0.1)")
        sp.add_argument("--space", choices=["z", "eps"], default="eps",
                        help="sample in latent space or noise space (default eps)")

    sp = sub.add_parser("train", help="train a model from a TOML config")
    sp.add_argument("--config", required=True, help="TOML config with schema_version = 1")
    sp.add_argument("--out", required=True, help="output directory (metrics, checkpoints, manifest)")
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--seed", type=int, default=None, help="override [trainer] seed")
    sp.add_argument("--threads", type=int, default=1, help="maximum worker threads (default 1)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw prior samples and decode them")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--n", type=int, required=True, help="number of samples")
    sp.add_argument("--out", required=True, help=".ebmd dataset, or .pgm/.ppm image grid")
    sp.add_argument("--record-chains", help="path prefix for chain CSVs (_states.csv, _energy.csv)")
    sp.add_argument("--thin", type=int, default=10, help="snapshot interval for --record-chains (default 10)")
    sp.add_argument("--image-shape", help="H,W or H,W,3 for image output")
    sp.add_argument("--rows", type=int, default=None, help="grid rows for image output")
    sampler(sp)
    common(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval-ood", help="hierarchical OOD scores and detection metrics")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--in-data", required=True, help="in-distribution dataset")
    sp.add_argument("--out-data", required=True, help="out-of-distribution dataset")
    sp.add_argument("--k", type=int, default=0, help="layer cut-off, 0..L (default 0)")
    sp.add_argument("--n-mc", type=int, default=4, help="Monte-Carlo replicates (default 4)")
    sp.add_argument("--report", required=True, help="DetectionReport JSON path")
    sp.add_argument("--scores", help="score CSV path (default: next to the report)")
    sampler(sp)
    common(sp)
    sp.set_defaults(func=cmd_eval_ood)

    sp = sub.add_parser("eval-ad", help="anomaly detection with one held-out label")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--data", required=True, help="labelled dataset")
    sp.add_argument("--heldout-label", type=int, required=True, help="label treated as anomalous")
    sp.add_argument("--report", required=True, help="DetectionReport JSON path")
    sp.add_argument("--scores", help="optional score CSV path")
    sp.add_argument("--n-mc", type=int, default=1, help="Monte-Carlo replicates (default 1)")
    sampler(sp)
    common(sp)
    sp.set_defaults(func=cmd_eval_ad)

    sp = sub.add_parser("viz-latent", help="prior-chain snapshots and inferred codes as CSV")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--data", help="dataset whose inferred codes are exported")
    sp.add_argument("--thin", type=int, default=10, help="snapshot interval (default 10)")
    sp.add_argument("--n-chains", type=int, default=500, help="prior chains (default 500)")
    sp.add_argument("--out", required=True, help="output directory")
    sampler(sp)
    common(sp)
    sp.set_defaults(func=cmd_viz_latent)

    sp = sub.add_parser("gradcheck", help="run the finite-difference and quadrature oracles")
    sp.add_argument("--dims", default="2,2", help="latent dims, e.g. 2,2; 1,1 adds the quadrature checks")
    sp.add_argument("--samples", type=int, default=100_000, help="exact samples for the quadrature check")
    sp.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="write a synthetic labelled dataset")
    sp.add_argument("--kind", choices=["mixture", "pinwheel", "rings"], default="mixture")
    sp.add_argument("--n", type=int, required=True, help="number of examples")
    sp.add_argument("--centers", help="mixture centers as 'x,y;x,y;...'")
    sp.add_argument("--n-centers", type=int, default=2, help="grid centers when --centers is absent")
    sp.add_argument("--spacing", type=float, default=4.0, help="grid spacing (default 4)")
    sp.add_argument("--std", type=float, default=0.3, help="mixture component std (default 0.3)")
    sp.add_argument("--arms", type=int, default=5, help="pinwheel arms")
    sp.add_argument("--radii", default="1,2", help="ring radii, comma-separated")
    sp.add_argument("--exclude-label", type=int, help="drop examples with this label")
    sp.add_argument("--only-label", type=int, help="keep only examples with this label")
    sp.add_argument("--out", required=True, help=".ebmd output path")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("ablate-steps", help="mode coverage versus prior Langevin steps")
    sp.add_argument("--config", required=True, help="TOML config with a mixture [data] generator")
    sp.add_argument("--ks", default="10,20,40,80", help="prior step counts (default 10,20,40,80)")
    sp.add_argument("--repeats", type=int, default=1, help="training seeds per k (default 1)")
    sp.add_argument("--n-samples", type=int, default=2000, help="samples for the coverage metric")
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)
    sp.set_defaults(func=cmd_ablate_steps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        for attr in ("out", "report", "scores", "record_chains"):
            if getattr(args, attr, None):
                Path(getattr(args, attr)).parent.mkdir(parents=True, exist_ok=True)
        # non-finite values are detected and reported as exit code 3
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedChainError as exc:
        print(f"error: sampler diverged at step {exc.step} (chains {exc.chains[:10]})", file=sys.stderr)
        return EXIT_DIVERGED
    except NonFiniteError as exc:
        print(f"error: non-finite values: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
