"""Joint latent EBM prior, Gaussian decoder and bottom-up inference stack.

Latent stacks are ordered bottom-up: ``z[0]`` is the layer that feeds the
decoder and ``z[-1]`` is the top layer with a standard normal prior. Every
log-density returns one value per row of the batch.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -8.0, 8.0
CHECKPOINT_FORMAT = "jointebm-checkpoint"
CHECKPOINT_VERSION = 1

__all__ = [
    "MlpSpec", "Mlp", "Module", "ConditionalGaussianLayer", "EnergyHead",
    "JointEbmPrior", "GeneratorDecoder", "InferenceStack", "Inference",
    "ModelConfig", "LatentEbm", "CheckpointError",
    "gaussian_prior_logpdf", "energy_sum", "unnormalized_log_prior",
    "decode_log_likelihood", "infer", "generate",
    "save_checkpoint", "load_checkpoint",
]


class CheckpointError(ValueError):
    pass


@dataclass
class MlpSpec:
    input_dim: int
    hidden_dims: list[int]
    output_dim: int
    activation: str = "leaky_relu"
    final_activation: str = "none"
    slope: float = 0.2

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation not in ("leaky_relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.final_activation not in ("none", "tanh"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]


class Module:
    """Container of named parameter tensors and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def load_parameters(self, mapping: dict[str, Tensor], prefix: str = "") -> None:
        for k in self._params:
            key = prefix + k
            if key in mapping:
                new = mapping[key]
                if new.shape != self._params[k].shape:
                    raise ValueError(f"shape mismatch for {key}: {new.shape} vs {self._params[k].shape}")
                self._params[k] = new
        for name, child in self._children.items():
            child.load_parameters(mapping, f"{prefix}{name}.")


class Mlp(Module):
    def __init__(self, spec: MlpSpec, rng: np.random.Generator, dtype=np.float64,
                 hidden_gain: float | None = None, final_gain: float = 1.0):
        super().__init__()
        self.spec = spec
        dims = spec.dims
        if hidden_gain is None:
            # He initialisation for leaky units
            hidden_gain = float(np.sqrt(2.0 / (1.0 + spec.slope ** 2)))
        for j, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            gain = final_gain if j == len(dims) - 2 else hidden_gain
            w = rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))
            self._params[f"W{j}"] = Tensor(w, dtype=dtype)
            self._params[f"b{j}"] = Tensor(np.zeros(fan_out), dtype=dtype)

    @property
    def n_layers(self) -> int:
        return len(self.spec.dims) - 1

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for j in range(self.n_layers):
            h = T.add_bias(T.matmul(h, self._params[f"W{j}"]), self._params[f"b{j}"])
            if j < self.n_layers - 1:
                h = T.leaky_relu(h, self.spec.slope) if self.spec.activation == "leaky_relu" else T.tanh(h)
            elif self.spec.final_activation == "tanh":
                h = T.tanh(h)
        return h

    __call__ = forward


class ConditionalGaussianLayer(Module):
    """p(z_i | z_{i+1}) with mean and clamped log-variance from one trunk."""

    def __init__(self, index: int, parent_dim: int, dim: int, hidden: Sequence[int],
                 rng: np.random.Generator, dtype=np.float64, slope: float = 0.2):
        super().__init__()
        self.index = index
        self.dim = dim
        self.parent_dim = parent_dim
        spec = MlpSpec(parent_dim, list(hidden), 2 * dim, slope=slope)
        self.net = Mlp(spec, rng, dtype, final_gain=0.1)
        self._children["net"] = self.net

    def forward(self, parent: Tensor) -> tuple[Tensor, Tensor]:
        mean, log_var = T.split(self.net(parent), [self.dim, self.dim])
        return mean, T.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    __call__ = forward


class EnergyHead(Module):
    """Scalar correction f_i(z_i); the energy of the layer is its negative.

    The output layer starts at exactly zero so an untrained prior equals the
    Gaussian backbone.
    """

    def __init__(self, index: int, dim: int, hidden: Sequence[int], rng: np.random.Generator,
                 dtype=np.float64, slope: float = 0.2):
        super().__init__()
        self.index = index
        self.dim = dim
        spec = MlpSpec(dim, list(hidden), 1, slope=slope)
        self.net = Mlp(spec, rng, dtype, hidden_gain=0.02, final_gain=0.0)
        self._children["net"] = self.net

    def forward(self, z: Tensor) -> Tensor:
        return T.sum_(self.net(z), axis=1)

    __call__ = forward


def _standard_normal_logpdf(z: Tensor) -> Tensor:
    d = z.shape[-1]
    return T.add_scalar(T.scale(T.sum_(T.square(z), axis=-1), -0.5), -0.5 * d * T.LOG_2PI)


class JointEbmPrior(Module):
    """exp[sum_i f_i(z_i)] * prod_i p(z_i | z_{i+1}) * N(z_L; 0, I), unnormalised."""

    def __init__(self, dims: Sequence[int], energy_hidden: Sequence[int], cond_hidden: Sequence[int],
                 rng: np.random.Generator, dtype=np.float64, slope: float = 0.2):
        super().__init__()
        if len(dims) < 1 or any(d < 1 for d in dims):
            raise ValueError(f"invalid latent dims {dims}")
        self.dims = [int(d) for d in dims]
        self.dtype = np.dtype(dtype)
        self.energies = [EnergyHead(i, d, energy_hidden, rng, dtype, slope) for i, d in enumerate(self.dims)]
        self.conditionals = [
            ConditionalGaussianLayer(i, self.dims[i + 1], self.dims[i], cond_hidden, rng, dtype, slope)
            for i in range(self.n_layers - 1)
        ]
        for i, e in enumerate(self.energies):
            self._children[f"energy{i}"] = e
        for i, c in enumerate(self.conditionals):
            self._children[f"cond{i}"] = c

    @property
    def n_layers(self) -> int:
        return len(self.dims)

    def as_stack(self, z: Sequence) -> list[Tensor]:
        if len(z) != self.n_layers:
            raise T.DimensionError(f"expected {self.n_layers} latent layers, got {len(z)}")
        out = []
        n = None
        for i, (zi, d) in enumerate(zip(z, self.dims)):
            zi = zi if isinstance(zi, Tensor) else Tensor(np.atleast_2d(zi), dtype=self.dtype)
            if zi.ndim != 2 or zi.shape[1] != d:
                raise T.DimensionError(f"layer {i}: expected (n, {d}), got {zi.shape}")
            if n is not None and zi.shape[0] != n:
                raise T.DimensionError("latent layers disagree on batch size")
            n = zi.shape[0]
            out.append(zi)
        return out

    def layer_log_conditionals(self, z: Sequence[Tensor]) -> list[Tensor]:
        """log p(z_i | z_{i+1}) for i < L-1, then log N(z_top; 0, I)."""
        terms = []
        for i, cond in enumerate(self.conditionals):
            mean, log_var = cond(z[i + 1])
            terms.append(T.gaussian_log_density(z[i], mean, log_var))
        terms.append(_standard_normal_logpdf(z[-1]))
        return terms

    def gaussian_log_prob(self, z: Sequence) -> Tensor:
        z = self.as_stack(z)
        terms = self.layer_log_conditionals(z)
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return total

    def layer_energies(self, z: Sequence) -> list[Tensor]:
        z = self.as_stack(z)
        return [head(zi) for head, zi in zip(self.energies, z)]

    def energy_sum(self, z: Sequence) -> Tensor:
        terms = self.layer_energies(z)
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return total

    def unnormalized_log_prob(self, z: Sequence) -> Tensor:
        z = self.as_stack(z)
        return T.add(self.energy_sum(z), self.gaussian_log_prob(z))

    def tilted_factors(self, z: Sequence) -> list[Tensor]:
        """Per-layer log of exp[f_i(z_i)] * p(z_i | parent): the tilting view."""
        z = self.as_stack(z)
        return [T.add(f, g) for f, g in zip(self.layer_energies(z), self.layer_log_conditionals(z))]

    def ancestral_sample(self, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        """Draw from the Gaussian backbone (energy terms ignored)."""
        eps = [rng.standard_normal((n, d)).astype(self.dtype) for d in self.dims]
        return [t.data.copy() for t in self.epsilon_transform(eps)]

    def epsilon_transform(self, eps: Sequence, fixed: dict[int, np.ndarray | Tensor] | None = None) -> list[Tensor]:
        """Top-down map z_L = e_L, z_i = mu_i(z_{i+1}) + sigma_i(z_{i+1}) * e_i.

        Layers listed in ``fixed`` take the given value instead (their noise
        entry is ignored and may be ``None``).
        """
        fixed = fixed or {}
        if len(eps) != self.n_layers:
            raise T.DimensionError(f"expected {self.n_layers} noise layers, got {len(eps)}")
        z: list[Tensor | None] = [None] * self.n_layers
        for i in reversed(range(self.n_layers)):
            if i in fixed:
                v = fixed[i]
                z[i] = v if isinstance(v, Tensor) else Tensor(np.atleast_2d(v), dtype=self.dtype)
                continue
            e = eps[i] if isinstance(eps[i], Tensor) else Tensor(np.atleast_2d(eps[i]), dtype=self.dtype)
            if e.ndim != 2 or e.shape[1] != self.dims[i]:
                raise T.DimensionError(f"noise layer {i}: expected (n, {self.dims[i]}), got {e.shape}")
            if i == self.n_layers - 1:
                z[i] = e
            else:
                mean, log_var = self.conditionals[i](z[i + 1])
                z[i] = T.add(mean, T.mul(T.exp(T.scale(log_var, 0.5)), e))
        return z

    def epsilon_inverse(self, z: Sequence) -> list[np.ndarray]:
        """Recover the noise that :meth:`epsilon_transform` maps to ``z``."""
        z = self.as_stack(z)
        eps = [None] * self.n_layers
        eps[-1] = z[-1].data.copy()
        for i in range(self.n_layers - 1):
            mean, log_var = self.conditionals[i](z[i + 1])
            eps[i] = (z[i].data - mean.data) * np.exp(-0.5 * log_var.data)
        return eps


class GeneratorDecoder(Module):
    """x ~ N(g(z_1), sigma^2 I)."""

    def __init__(self, spec: MlpSpec, sigma: float, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if sigma <= 0:
            raise ValueError("observation sigma must be positive")
        self.spec = spec
        self.sigma = float(sigma)
        self.net = Mlp(spec, rng, dtype)
        self._children["net"] = self.net

    @property
    def data_dim(self) -> int:
        return self.spec.output_dim

    def mean(self, z1: Tensor) -> Tensor:
        return self.net(z1)

    def log_likelihood(self, x: Tensor, z1: Tensor) -> Tensor:
        g = self.mean(z1)
        if x.shape != g.shape:
            raise T.DimensionError(f"data shape {x.shape} does not match decoder output {g.shape}")
        sq = T.sum_(T.square(T.sub(x, g)), axis=-1)
        const = -0.5 * self.data_dim * float(np.log(2.0 * np.pi * self.sigma ** 2))
        return T.add_scalar(T.scale(sq, -0.5 / self.sigma ** 2), const)


class Inference(NamedTuple):
    z: list[Tensor]
    means: list[Tensor]
    log_vars: list[Tensor]
    log_q: Tensor


class InferenceStack(Module):
    """Bottom-up q(z_1 | x) prod_i q(z_{i+1} | z_i), each a diagonal Gaussian."""

    def __init__(self, data_dim: int, dims: Sequence[int], hidden: Sequence[int],
                 rng: np.random.Generator, dtype=np.float64, slope: float = 0.2):
        super().__init__()
        self.dims = [int(d) for d in dims]
        self.data_dim = int(data_dim)
        ins = [self.data_dim, *self.dims[:-1]]
        self.nets = [Mlp(MlpSpec(i, list(hidden), 2 * d, slope=slope), rng, dtype, final_gain=0.1)
                     for i, d in zip(ins, self.dims)]
        for j, net in enumerate(self.nets):
            self._children[f"enc{j}"] = net

    def layer(self, j: int, parent: Tensor) -> tuple[Tensor, Tensor]:
        mean, log_var = T.split(self.nets[j](parent), [self.dims[j], self.dims[j]])
        return mean, T.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    def infer(self, x: Tensor, rng: np.random.Generator | None = None, deterministic: bool = False,
              noise: Sequence[np.ndarray] | None = None) -> Inference:
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise T.DimensionError(f"expected data of shape (n, {self.data_dim}), got {x.shape}")
        n = x.shape[0]
        zs, means, lvs, logq = [], [], [], None
        parent = x
        for j, d in enumerate(self.dims):
            mean, log_var = self.layer(j, parent)
            if deterministic:
                z = mean
            else:
                e = noise[j] if noise is not None else rng.standard_normal((n, d))
                z = T.add(mean, T.mul(T.exp(T.scale(log_var, 0.5)), Tensor(e, dtype=x.dtype)))
            lq = T.gaussian_log_density(z, mean, log_var)
            logq = lq if logq is None else T.add(logq, lq)
            zs.append(z)
            means.append(mean)
            lvs.append(log_var)
            parent = z
        return Inference(zs, means, lvs, logq)


# --------------------------------------------------------------------------
# functional surface

def gaussian_prior_logpdf(prior: JointEbmPrior, z: Sequence) -> Tensor:
    return prior.gaussian_log_prob(z)


def energy_sum(prior: JointEbmPrior, z: Sequence) -> Tensor:
    return prior.energy_sum(z)


def unnormalized_log_prior(prior: JointEbmPrior, z: Sequence) -> Tensor:
    return prior.unnormalized_log_prob(z)


def decode_log_likelihood(dec: GeneratorDecoder, x, z1) -> Tensor:
    dtype = dec.net._params["W0"].dtype
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x), dtype=dtype)
    z1 = z1 if isinstance(z1, Tensor) else Tensor(np.atleast_2d(z1), dtype=dtype)
    return dec.log_likelihood(x, z1)


def infer(enc: InferenceStack, x, rng: np.random.Generator | None = None, deterministic: bool = False,
          noise=None) -> Inference:
    dtype = enc.nets[0]._params["W0"].dtype
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x), dtype=dtype)
    return enc.infer(x, rng=rng, deterministic=deterministic, noise=noise)


def generate(dec: GeneratorDecoder, prior: JointEbmPrior, n: int, sampler_config, rng: np.random.Generator,
             noisy: bool = False):
    """Sample ``n`` data points through prior Langevin and the decoder.

    Returns ``(means, samples, z)``; ``samples`` is ``None`` unless ``noisy``.
    """
    from .samplers import sample_prior

    if n == 0:
        empty = np.empty((0, dec.data_dim), dtype=prior.dtype)
        return empty, (empty.copy() if noisy else None), [np.empty((0, d), dtype=prior.dtype) for d in prior.dims]
    z, _ = sample_prior(prior, n, sampler_config, rng)
    means = dec.mean(Tensor(z[0], dtype=prior.dtype)).data.copy()
    samples = None
    if noisy:
        samples = means + dec.sigma * rng.standard_normal(means.shape).astype(means.dtype)
    return means, samples, z


# --------------------------------------------------------------------------
# bundled model + checkpoints

@dataclass
class ModelConfig:
    data_dim: int
    latent_dims: list[int]
    energy_hidden: list[int] = field(default_factory=lambda: [100, 100])
    cond_hidden: list[int] = field(default_factory=lambda: [200, 200, 200])
    dec_hidden: list[int] = field(default_factory=lambda: [200, 200])
    enc_hidden: list[int] = field(default_factory=lambda: [200, 200])
    slope: float = 0.2
    sigma: float = 0.3
    decoder_final: str = "none"
    dtype: str = "float32"
    with_encoder: bool = True
    init_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)


class LatentEbm(Module):
    """Prior, decoder and (optional) inference stack with grouped parameters.

    Parameter names carry the group as prefix: ``alpha`` (energy heads),
    ``beta0`` (decoder), ``beta`` (conditional Gaussians), ``omega`` (encoder).
    """

    GROUPS = ("alpha", "beta0", "beta", "omega")

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dtype = np.dtype(config.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(config.init_seed)
        self.prior = JointEbmPrior(config.latent_dims, config.energy_hidden, config.cond_hidden,
                                   rng, dtype, config.slope)
        dec_spec = MlpSpec(config.latent_dims[0], list(config.dec_hidden), config.data_dim,
                           final_activation=config.decoder_final, slope=config.slope)
        self.decoder = GeneratorDecoder(dec_spec, config.sigma, rng, dtype)
        self.encoder = (InferenceStack(config.data_dim, config.latent_dims, config.enc_hidden, rng, dtype,
                                       config.slope) if config.with_encoder else None)

    @property
    def n_layers(self) -> int:
        return self.prior.n_layers

    def tensor(self, a) -> Tensor:
        return Tensor(np.atleast_2d(np.asarray(a)), dtype=self.dtype)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, e in enumerate(self.prior.energies):
            out.update(e.named_parameters(f"alpha.{i}."))
        out.update(self.decoder.named_parameters("beta0."))
        for i, c in enumerate(self.prior.conditionals):
            out.update(c.named_parameters(f"beta.{i}."))
        if self.encoder is not None:
            out.update(self.encoder.named_parameters("omega."))
        return out

    def group(self, name: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.split(".", 1)[0] == name}

    def load_parameters(self, mapping: dict[str, Tensor], prefix: str = "") -> None:
        for i, e in enumerate(self.prior.energies):
            e.load_parameters(mapping, f"alpha.{i}.")
        self.decoder.load_parameters(mapping, "beta0.")
        for i, c in enumerate(self.prior.conditionals):
            c.load_parameters(mapping, f"beta.{i}.")
        if self.encoder is not None:
            self.encoder.load_parameters(mapping, "omega.")

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_parameters({k: Tensor(v, dtype=self.dtype) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def zero_energies(self) -> None:
        """Make every f_i identically zero (the Gaussian-prior ablation).

        Only each head's output layer is zeroed, so hidden features stay
        non-degenerate and the heads remain trainable.
        """
        for i, head in enumerate(self.prior.energies):
            last = head.net.n_layers - 1
            names = [f"alpha.{i}.net.W{last}", f"alpha.{i}.net.b{last}"]
            self.set_arrays({k: np.zeros_like(self.named_parameters()[k].data) for k in names})

    def copy(self) -> "LatentEbm":
        other = LatentEbm(self.config)
        other.load_parameters(self.named_parameters())
        return other

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        save_checkpoint(self, path, extra, meta)

    @classmethod
    def load(cls, path) -> "LatentEbm":
        return load_checkpoint(path)[0]


def save_checkpoint(model: LatentEbm, path, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write ``manifest.json`` + ``weights.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    items = list(model.arrays().items()) + sorted((extra or {}).items())
    for name, arr in items:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "tensors": entries,
        "meta": meta or {},
    }
    tmp_w = path / "weights.bin.tmp"
    tmp_m = path / "manifest.json.tmp"
    tmp_w.write_bytes(b"".join(blobs))
    tmp_m.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp_w, path / "weights.bin")
    os.replace(tmp_m, path / "manifest.json")


def load_checkpoint(path) -> tuple[LatentEbm, dict[str, np.ndarray], dict]:
    """Returns ``(model, extra_tensors, meta)``; shapes are validated."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        raw = (path / "weights.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    model = LatentEbm(ModelConfig.from_dict(manifest["config"]))
    expected = {k: v.shape for k, v in model.named_parameters().items()}
    params, extra = {}, {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"weights.bin truncated: tensor {e['name']} needs bytes up to {end}, "
                                  f"file has {len(raw)}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"), count=int(np.prod(e["shape"], dtype=int)),
                            offset=e["offset"]).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
        if e["name"] in expected:
            if tuple(e["shape"]) != tuple(expected[e["name"]]):
                raise CheckpointError(f"shape mismatch for {e['name']}: manifest {e['shape']}, "
                                      f"model {list(expected[e['name']])}")
            params[e["name"]] = arr
        else:
            extra[e["name"]] = arr
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    model.set_arrays(params)
    return model, extra, manifest.get("meta", {})
