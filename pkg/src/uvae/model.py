"""Recognition and generative networks: q(y|x), q(z|x,y), p(x|y,z) and q(z|y).

Parameters live in a :class:`~uvae.diffcore.ParamSet` keyed
``"<partition>/<network>/<name>"``; the decoder is the only theta network.
All methods are pure functions of ``(params, inputs)`` so the same code
serves evaluation and differentiation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import distributions as D
from .diffcore import (
    ACTIVATIONS,
    ContractViolation,
    ParamSet,
    Tensor,
    activate,
    as_tensor,
    clip,
    concat,
    dense_layer,
    load_params,
    log,
    save_params,
    sigmoid,
    softmax,
    softplus,
)

NETWORKS = {
    "encoder_y": "phi",
    "encoder_z": "phi",
    "decoder_x": "theta",
    "aux_z": "phi",
}

Z_CLAMP = 1e-6
Z_STD_FLOOR = 1e-4


@dataclass
class ModelConfig:
    x_dim: int
    y_dim: int
    z_dim: int = 1
    y_hidden: list = field(default_factory=lambda: [5])
    z_hidden: list = field(default_factory=lambda: [5])
    x_hidden: list = field(default_factory=lambda: [20])
    aux_hidden: list = field(default_factory=lambda: [5])
    y_activation: str = "tanh"
    z_activation: str = "tanh"
    x_activation: str = "tanh"
    aux_activation: str = "tanh"
    y_family: str = "LogisticNormal"
    y_output: str = "softmax"
    z_output: str = "sigmoid"
    x_family: str = "DiagGaussian"
    x_output: str = "identity"
    z_lo: float = -1.5
    z_hi: float = 1.5
    temperature: float = 0.5
    x_temperature: float = 0.5
    fixed_x_logvar: float | None = None
    use_aux: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("x_dim", "y_dim", "z_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"model.{name} must be positive")
        for name in ("y_hidden", "z_hidden", "x_hidden", "aux_hidden"):
            widths = getattr(self, name)
            if any(int(w) < 1 for w in widths):
                raise ContractViolation(f"model.{name} widths must be positive")
        for name in ("y_activation", "z_activation", "x_activation", "aux_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ContractViolation(f"model.{name} must be one of {ACTIVATIONS}")
        if self.y_family not in ("LogisticNormal", "Concrete"):
            raise ContractViolation("model.y_family must be LogisticNormal or Concrete")
        if self.x_family not in ("DiagGaussian", "Bernoulli"):
            raise ContractViolation("model.x_family must be DiagGaussian or Bernoulli")
        if self.y_output not in ("softmax", "identity"):
            raise ContractViolation("model.y_output must be softmax or identity")
        if self.y_family == "LogisticNormal" and self.y_output != "softmax":
            raise ContractViolation("model.y_output must be softmax for a LogisticNormal y")
        if self.z_output != "sigmoid":
            raise ContractViolation("model.z_output must be sigmoid")
        if self.x_output not in ("identity", "softplus"):
            raise ContractViolation("model.x_output must be identity or softplus")
        if not self.z_lo < self.z_hi:
            raise ContractViolation("model.z_lo must be below model.z_hi")
        if not (self.temperature > 0 and self.x_temperature > 0):
            raise ContractViolation("model temperatures must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ContractViolation(f"unknown model config field {key!r}")
        return cls(**d)

    @property
    def z_std_cap(self) -> float:
        # mean +- 6 sigma spans at most twice the support width
        return (self.z_hi - self.z_lo) / 6.0


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


class Model:
    """The three (optionally four) conditional networks for a ModelConfig."""

    def __init__(self, config: ModelConfig):
        self.config = config

    # -- construction ---------------------------------------------------
    def layout(self) -> dict[str, tuple[int, ...]]:
        """Parameter identifiers and shapes, in a fixed order."""
        c = self.config
        shapes: dict[str, tuple[int, ...]] = {}

        def stack(net: str, n_in: int, hidden, heads: dict[str, int]):
            part = NETWORKS[net]
            for i, w in enumerate(hidden):
                shapes[f"{part}/{net}/W{i}"] = (int(w), n_in)
                shapes[f"{part}/{net}/b{i}"] = (int(w),)
                n_in = int(w)
            for head, n_out in heads.items():
                shapes[f"{part}/{net}/{head}_W"] = (n_out, n_in)
                shapes[f"{part}/{net}/{head}_b"] = (n_out,)

        if c.y_family == "LogisticNormal":
            stack("encoder_y", c.x_dim, c.y_hidden, {"mu": c.y_dim, "logvar": c.y_dim})
        else:
            stack("encoder_y", c.x_dim, c.y_hidden, {"logits": c.y_dim})
        stack("encoder_z", c.x_dim + c.y_dim, c.z_hidden, {"mean": c.z_dim, "std": c.z_dim})
        if c.x_family == "DiagGaussian":
            heads = {"mu": c.x_dim}
            if c.fixed_x_logvar is None:
                heads["logvar"] = c.x_dim
        else:
            heads = {"logits": c.x_dim}
        stack("decoder_x", c.y_dim + c.z_dim, c.x_hidden, heads)
        if c.use_aux:
            stack("aux_z", c.y_dim, c.aux_hidden, {"mean": c.z_dim, "std": c.z_dim})
        return shapes

    def init_params(self, seed: int) -> ParamSet:
        """Glorot-uniform weights and zero biases, reproducible from ``seed``."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for key, shape in self.layout().items():
            if len(shape) == 2:
                arrays[key] = _glorot(rng, *shape)
            else:
                arrays[key] = np.zeros(shape)
        return ParamSet(arrays)

    def zero_params(self) -> ParamSet:
        return ParamSet({k: np.zeros(s) for k, s in self.layout().items()})

    # -- network plumbing -----------------------------------------------------
    def _trunk(self, params, net: str, inp, hidden, activation: str) -> Tensor:
        part = NETWORKS[net]
        h = as_tensor(inp)
        for i in range(len(hidden)):
            h = dense_layer(params[f"{part}/{net}/W{i}"], params[f"{part}/{net}/b{i}"], h, activation)
        return h

    def _head(self, params, net: str, head: str, h, activation: str = "identity") -> Tensor:
        part = NETWORKS[net]
        return dense_layer(params[f"{part}/{net}/{head}_W"], params[f"{part}/{net}/{head}_b"], h, activation)

    def _z_head(self, params, net: str, h) -> D.DistSpec:
        c = self.config
        mean = c.z_lo + (c.z_hi - c.z_lo) * sigmoid(self._head(params, net, "mean", h))
        sp = softplus(self._head(params, net, "std", h))
        std = Z_STD_FLOOR + sp / (1.0 + sp / c.z_std_cap)
        return D.diag_gaussian(mean, 2.0 * log(std))

    @staticmethod
    def _check_width(v, n: int, what: str) -> None:
        if as_tensor(v).shape[-1] != n:
            raise ContractViolation(f"{what} has length {as_tensor(v).shape[-1]}, expected {n}")

    # -- the networks -----------------------------------------------------------
    def encode_y(self, params, x) -> D.DistSpec:
        c = self.config
        self._check_width(x, c.x_dim, "x")
        h = self._trunk(params, "encoder_y", x, c.y_hidden, c.y_activation)
        if c.y_family == "LogisticNormal":
            mu = self._head(params, "encoder_y", "mu", h)
            logvar = self._head(params, "encoder_y", "logvar", h)
            return D.logistic_normal(mu, logvar)
        return D.concrete(self._head(params, "encoder_y", "logits", h), c.temperature)

    def predict_y(self, params, x) -> Tensor:
        """Point prediction of y: the mean head of q(y|x) mapped onto the simplex.

        The Gaussian of a logistic-normal lives in pre-softmax space, so the
        prediction is softmax(mu); for Concrete it is softmax(logits).
        """
        q = self.encode_y(params, x)
        return softmax(q["mu"] if q.family == "LogisticNormal" else q["logits"])

    def encode_z(self, params, x, y) -> D.DistSpec:
        c = self.config
        self._check_width(x, c.x_dim, "x")
        self._check_width(y, c.y_dim, "y")
        h = self._trunk(params, "encoder_z", concat([x, y]), c.z_hidden, c.z_activation)
        return self._z_head(params, "encoder_z", h)

    def aux_z(self, params, y) -> D.DistSpec:
        c = self.config
        if not c.use_aux:
            raise ContractViolation("aux_z network is not configured (model.use_aux)")
        self._check_width(y, c.y_dim, "y")
        h = self._trunk(params, "aux_z", y, c.aux_hidden, c.aux_activation)
        return self._z_head(params, "aux_z", h)

    def decode_x(self, params, y, z) -> D.DistSpec:
        c = self.config
        self._check_width(y, c.y_dim, "y")
        self._check_width(z, c.z_dim, "z")
        h = self._trunk(params, "decoder_x", concat([y, z]), c.x_hidden, c.x_activation)
        if c.x_family == "Bernoulli":
            return D.bernoulli(self._head(params, "decoder_x", "logits", h), c.x_temperature)
        mu = self._head(params, "decoder_x", "mu", h, c.x_output)
        if c.fixed_x_logvar is None:
            logvar = self._head(params, "decoder_x", "logvar", h)
        else:
            logvar = Tensor(np.full(mu.shape, float(c.fixed_x_logvar)))
        return D.diag_gaussian(mu, logvar)

    # -- derived operations --------------------------------------------------------
    def clamp_z(self, z) -> Tensor:
        c = self.config
        return clip(z, c.z_lo + Z_CLAMP, c.z_hi - Z_CLAMP)

    def generate_conditional(self, params, y, z, mode: str = "mean", noise=None) -> Tensor:
        """Decoder mean, or a reparameterized decoder sample when mode='sample'."""
        px = self.decode_x(params, y, z)
        if mode == "mean":
            return px.mean()
        if mode == "sample":
            if noise is None:
                raise ContractViolation("mode='sample' requires noise['x_eps']")
            return D.rsample(px, noise["x_eps"])
        raise ContractViolation(f"unknown mode {mode!r}")

    def infer_nuisance(self, params, x, y=None, noise=None) -> Tensor:
        """Sample z from q(z|x,y), drawing y from q(y|x) first when y is absent."""
        if noise is None:
            raise ContractViolation("infer_nuisance requires noise")
        if y is None:
            y = D.rsample(self.encode_y(params, x), noise["y_eps"])
        z = D.rsample(self.encode_z(params, x, y), noise["z_eps"])
        return self.clamp_z(z)

    def y_noise_kind(self) -> str:
        return "normal" if self.config.y_family == "LogisticNormal" else "gumbel"

    def x_noise_kind(self) -> str:
        return "normal" if self.config.x_family == "DiagGaussian" else "logistic"


def save_checkpoint(directory, config: ModelConfig, params: ParamSet, name: str = "checkpoint") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bin_path = directory / f"{name}.bin"
    cfg_path = directory / f"{name}.model.json"
    save_params(params, bin_path)
    cfg_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return bin_path, cfg_path


def load_checkpoint(directory, name: str = "checkpoint") -> tuple[ModelConfig, ParamSet]:
    directory = Path(directory)
    config = ModelConfig.from_dict(json.loads((directory / f"{name}.model.json").read_text()))
    return config, load_params(directory / f"{name}.bin")
