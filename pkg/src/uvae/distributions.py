"""Distribution families with exact log-densities and reparameterized sampling.

All functions accept a single vector or a batch of row vectors; batched
inputs produce one log-density per row.
"""
from __future__ import annotations

import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .diffcore import (
    ContractViolation,
    Tensor,
    as_tensor,
    exp,
    floor,
    log,
    log_softmax,
    logsumexp,
    sigmoid,
    softmax,
    softplus,
    tsum,
)

FAMILIES = (
    "DiagGaussian",
    "LogisticNormal",
    "UniformBox",
    "SimplexUniform",
    "Concrete",
    "Bernoulli",
)

ETA = 1e-9
LOG_2PI = math.log(2.0 * math.pi)
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class DistSpec:
    """A family tag plus its parameter tensors.

    DiagGaussian / LogisticNormal: ``mu``, ``logvar``.
    UniformBox: ``lo``, ``hi``.  SimplexUniform: ``k``.
    Concrete: ``logits``, ``temperature``.  Bernoulli: ``logits`` and an
    optional relaxation ``temperature`` used only by :func:`rsample`.
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown family {self.family!r}")
        p = self.params
        if self.family in ("DiagGaussian", "LogisticNormal"):
            if not np.all(np.isfinite(as_tensor(p["logvar"]).data)):
                raise ContractViolation("log-variance must be finite")
        elif self.family == "UniformBox":
            if not np.all(np.asarray(p["lo"]) < np.asarray(p["hi"])):
                raise ContractViolation("UniformBox requires lo < hi per coordinate")
        elif self.family in ("Concrete",):
            if not p["temperature"] > 0:
                raise ContractViolation("temperature must be positive")

    def __getitem__(self, key):
        return self.params[key]

    @property
    def dim(self) -> int:
        if self.family == "SimplexUniform":
            return int(self.params["k"])
        if self.family == "UniformBox":
            return int(np.size(self.params["lo"]))
        key = "mu" if "mu" in self.params else "logits"
        return as_tensor(self.params[key]).shape[-1]

    def mean(self) -> Tensor:
        """Mean of the distribution for the families where it is closed form."""
        if self.family == "DiagGaussian":
            return as_tensor(self.params["mu"])
        if self.family == "Bernoulli":
            return sigmoid(self.params["logits"])
        if self.family == "UniformBox":
            return as_tensor(0.5 * (np.asarray(self.params["lo"]) + np.asarray(self.params["hi"])))
        if self.family == "SimplexUniform":
            k = self.dim
            return as_tensor(np.full(k, 1.0 / k))
        raise ContractViolation(f"{self.family} has no closed-form mean")


def diag_gaussian(mu, logvar) -> DistSpec:
    return DistSpec("DiagGaussian", {"mu": as_tensor(mu), "logvar": as_tensor(logvar)})


def logistic_normal(mu, logvar) -> DistSpec:
    return DistSpec("LogisticNormal", {"mu": as_tensor(mu), "logvar": as_tensor(logvar)})


def uniform_box(lo, hi) -> DistSpec:
    return DistSpec("UniformBox", {"lo": np.asarray(lo, float), "hi": np.asarray(hi, float)})


def simplex_uniform(k: int) -> DistSpec:
    return DistSpec("SimplexUniform", {"k": int(k)})


def concrete(logits, temperature: float) -> DistSpec:
    return DistSpec("Concrete", {"logits": as_tensor(logits), "temperature": float(temperature)})


def bernoulli(logits, temperature: float = 0.5) -> DistSpec:
    return DistSpec("Bernoulli", {"logits": as_tensor(logits), "temperature": float(temperature)})


# -- noise ------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseDraw(Mapping):
    """Named noise arrays plus the seed and stream position that produced them."""

    arrays: dict
    seed: int | None = None
    position: int = 0

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)


class NoiseStream:
    """Seeded source of standard noise; ``position`` counts completed draws."""

    KINDS = ("normal", "gumbel", "uniform", "logistic")

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.position = 0
        self._rng = np.random.default_rng(self.seed)

    def sample(self, kind: str, shape) -> np.ndarray:
        rng = self._rng
        if kind == "normal":
            return rng.standard_normal(shape)
        if kind == "gumbel":
            return rng.gumbel(size=shape)
        if kind == "uniform":
            return rng.random(shape)
        if kind == "logistic":
            return rng.logistic(size=shape)
        raise ContractViolation(f"unknown noise kind {kind!r}")

    def draw(self, spec: Mapping[str, tuple]) -> NoiseDraw:
        """``spec`` maps a name to ``(kind, shape)``; names are drawn in order."""
        start = self.position
        arrays = {name: self.sample(kind, shape) for name, (kind, shape) in spec.items()}
        self.position += 1
        return NoiseDraw(arrays, seed=self.seed, position=start)


# -- log-densities -------------------------------------------------------------------


def _values(value) -> np.ndarray:
    return as_tensor(value).data


def _check_simplex(y: np.ndarray, family: str, open_: bool) -> None:
    sums = y.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        raise ContractViolation(f"{family}: value is off the simplex (sum {sums})")
    if open_ and np.any(y <= 0.0):
        raise ContractViolation(f"{family}: value must lie on the open simplex")
    if np.any(y < 0.0):
        raise ContractViolation(f"{family}: negative component")


def log_density(dist: DistSpec, value) -> Tensor:
    """Exact log-density of ``value`` under ``dist``, one entry per row."""
    fam = dist.family
    p = dist.params
    if fam == "DiagGaussian":
        v = as_tensor(value)
        if v.shape[-1] != dist.dim:
            raise ContractViolation(f"value length {v.shape[-1]} != {dist.dim}")
        mu, logvar = as_tensor(p["mu"]), as_tensor(p["logvar"])
        quad = (v - mu) * (v - mu) / exp(logvar)
        return tsum(logvar + quad + LOG_2PI, axis=-1) * -0.5
    if fam == "LogisticNormal":
        return _logistic_normal_logpdf(p["mu"], p["logvar"], value)
    if fam == "UniformBox":
        v = _values(value)
        lo, hi = p["lo"], p["hi"]
        if v.shape[-1] != lo.size:
            raise ContractViolation(f"value length {v.shape[-1]} != {lo.size}")
        inside = np.all((v >= lo) & (v <= hi), axis=-1)
        return Tensor(np.where(inside, -np.sum(np.log(hi - lo)), -np.inf))
    if fam == "SimplexUniform":
        v = _values(value)
        if v.shape[-1] != dist.dim:
            raise ContractViolation(f"value length {v.shape[-1]} != {dist.dim}")
        _check_simplex(v, fam, open_=False)
        return Tensor(np.full(v.shape[:-1], gammaln(dist.dim)))
    if fam == "Concrete":
        return _concrete_logpdf(p["logits"], p["temperature"], value)
    if fam == "Bernoulli":
        v = as_tensor(value)
        if np.any(v.data < 0.0) or np.any(v.data > 1.0):
            raise ContractViolation("Bernoulli values must lie in [0, 1]")
        logits = as_tensor(p["logits"])
        return tsum(v * logits - softplus(logits), axis=-1)
    raise ContractViolation(fam)


def _logistic_normal_logpdf(mu, logvar, value) -> Tensor:
    """Density of softmax(mu + sigma * eps) on the simplex.

    The log-ratios r_i = log(y_i / y_K), i < K, are Gaussian with mean
    mu_i - mu_K and covariance diag(sigma_i^2) + sigma_K^2 * 11^T.  The
    Jacobian of the log-ratio map contributes -sum_i log y_i.
    """
    y = as_tensor(value)
    _check_simplex(y.data, "LogisticNormal", open_=True)
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    k = y.shape[-1]
    if mu.shape[-1] != k:
        raise ContractViolation(f"value length {k} != {mu.shape[-1]}")
    logy = log(y)
    r = logy[..., : k - 1] - logy[..., k - 1 :]
    u = r - (mu[..., : k - 1] - mu[..., k - 1 :])
    inv_d = exp(-logvar[..., : k - 1])
    s = exp(logvar[..., k - 1])
    a = tsum(u * u * inv_d, axis=-1)
    b = tsum(u * inv_d, axis=-1)
    c = 1.0 + s * tsum(inv_d, axis=-1)
    quad = a - s * b * b / c
    logdet = tsum(logvar[..., : k - 1], axis=-1) + log(c)
    return (quad + logdet + (k - 1) * LOG_2PI) * -0.5 - tsum(logy, axis=-1)


def _concrete_logpdf(logits, temperature: float, value) -> Tensor:
    y = as_tensor(value)
    _check_simplex(y.data, "Concrete", open_=True)
    logits = as_tensor(logits)
    k = y.shape[-1]
    tau = float(temperature)
    logy = log(y)
    return (
        gammaln(k)
        + (k - 1) * math.log(tau)
        + tsum(logits - (tau + 1.0) * logy, axis=-1)
        - k * logsumexp(logits - tau * logy, axis=-1)
    )


# -- sampling -------------------------------------------------------------------------


def rsample(dist: DistSpec, noise) -> Tensor:
    """Reparameterized draw: a differentiable function of the parameters.

    DiagGaussian and LogisticNormal take standard-normal noise, Concrete takes
    standard Gumbel noise, Bernoulli (relaxed) takes standard logistic noise,
    UniformBox takes U(0,1) noise and SimplexUniform takes U(0,1) noise that
    is turned into exponential spacings.
    """
    fam = dist.family
    p = dist.params
    eps = np.asarray(noise, dtype=np.float64)
    if fam in ("DiagGaussian", "LogisticNormal"):
        mu, logvar = as_tensor(p["mu"]), as_tensor(p["logvar"])
        if eps.shape[-1] != mu.shape[-1]:
            raise ContractViolation(f"noise length {eps.shape[-1]} != {mu.shape[-1]}")
        h = mu + exp(logvar * 0.5) * eps
        return h if fam == "DiagGaussian" else softmax(h)
    if fam == "Concrete":
        logits = as_tensor(p["logits"])
        if eps.shape[-1] != logits.shape[-1]:
            raise ContractViolation(f"noise length {eps.shape[-1]} != {logits.shape[-1]}")
        return exp(log_softmax((logits + eps) / p["temperature"]))
    if fam == "Bernoulli":
        logits = as_tensor(p["logits"])
        return sigmoid((logits + eps) / p["temperature"])
    if fam == "UniformBox":
        return Tensor(p["lo"] + (p["hi"] - p["lo"]) * eps)
    if fam == "SimplexUniform":
        e = -np.log(np.clip(eps, 1e-300, 1.0))
        return Tensor(e / e.sum(axis=-1, keepdims=True))
    raise ContractViolation(fam)


# -- divergences ------------------------------------------------------------------


def kl_categorical(p, q, eta: float = ETA) -> Tensor:
    """KL(p || q) = sum_i p_i log(p_i / q_i) with 0 log 0 = 0 and q floored at eta.

    ``p`` is treated as fixed (labels); gradients flow through ``q``.
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    q = as_tensor(q)
    if p.shape != q.shape:
        raise ContractViolation(f"shape mismatch {p.shape} vs {q.shape}")
    if np.any(p < 0.0) or np.any(q.data < 0.0):
        raise ContractViolation("kl_categorical: negative component")
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    cross = tsum(log(floor(q, eta)) * p, axis=-1)
    return tsum(Tensor(plogp), axis=-1) - cross


def project_open_simplex(y, eta: float = ETA) -> np.ndarray:
    """Pull a closed-simplex point (e.g. a one-hot) into the open simplex."""
    y = np.asarray(y, dtype=np.float64)
    k = y.shape[-1]
    return (y + eta) / (1.0 + k * eta)
