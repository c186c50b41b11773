"""Evidence lower bounds for the forward and reverse models and the combined objective.

Forward model: p(y) p(z) p(x|y,z) with recognition q(y|x) q(z|x,y).
Reverse model: q(x) q(y|x) q(z|x,y) with recognition p(z) p(x|y,z).

Every bound returns an :class:`ElboEstimate` holding one value per batch row
and the named terms that sum to it.  Noise is always passed in explicitly, so
each function is a pure function of ``(params, batch, noise)``.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import distributions as D
from .diffcore import (
    ContractViolation,
    NonFiniteError,
    Tensor,
    as_tensor,
    exp,
    logsumexp,
    tmean,
    tsum,
)
from .model import Model

log = logging.getLogger(__name__)

VARIANTS = ("observed_z", "latent_z", "aux_z")
DEFAULT_GAMMA = 10.0


@dataclass(frozen=True)
class ObjectiveCoefficients:
    alpha_f: float = 1.0
    alpha_f_d: float = 1.0
    alpha_r: float = 0.01
    alpha_r_d: float = 1.0
    # weight on the q(z|y) consistency KL; only read by the aux_z variant
    aux_consistency: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ContractViolation(f"coefficient {f.name} must be non-negative")

    def m2(self, strict: bool = False) -> ObjectiveCoefficients:
        """Forward-only ablation: alpha_r = 0 (and alpha_r_d = 0 when strict)."""
        return replace(self, alpha_r=0.0, alpha_r_d=0.0 if strict else self.alpha_r_d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ObjectiveCoefficients:
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ContractViolation(f"unknown coefficient {key!r}")
        return cls(**d)


CRISM_COEFFICIENTS = ObjectiveCoefficients(1.0, 1.0, 0.01, 1.0)
LIBS_COEFFICIENTS = ObjectiveCoefficients(0.01, 10.0, 0.0001, 0.0001)


@dataclass
class ElboEstimate:
    """Per-row bound value and its named terms; ``value`` is the term sum."""

    terms: dict[str, Tensor]
    noise: Mapping | None = None
    value: Tensor = field(init=False)

    def __post_init__(self):
        total = None
        for t in self.terms.values():
            total = t if total is None else total + t
        self.value = total

    def total(self) -> Tensor:
        return tsum(self.value)

    def breakdown(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.terms.items()}


# -- helpers ---------------------------------------------------------------------


def _rows(a) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def _repeat(a, samples: int):
    if samples == 1:
        return a
    if isinstance(a, Tensor):
        idx = np.repeat(np.arange(a.shape[0]), samples)
        return a[idx]
    return np.repeat(a, samples, axis=0)


def _average(t: Tensor, n: int, samples: int) -> Tensor:
    if samples == 1:
        return t
    return tmean(t.reshape(n, samples), axis=1)


def _checked(name: str, fn):
    try:
        t = fn()
    except NonFiniteError as exc:
        raise NonFiniteError(f"{name} <- {exc.op}") from exc
    t = as_tensor(t)
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(name)
    return t


def _estimate(terms: dict, n: int, samples: int, noise) -> ElboEstimate:
    return ElboEstimate({k: _average(v, n, samples) for k, v in terms.items()}, noise)


def log_prior_y(model: Model, y) -> Tensor:
    return D.log_density(D.simplex_uniform(model.config.y_dim), y)


def log_prior_z(model: Model, z) -> Tensor:
    c = model.config
    box = D.uniform_box(np.full(c.z_dim, c.z_lo), np.full(c.z_dim, c.z_hi))
    return D.log_density(box, model.clamp_z(z).data)


def log_q_x(model: Model, x, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """Uniform box prior U(-gamma, gamma) on x; a constant inside the box."""
    d = model.config.x_dim
    xs = np.clip(as_tensor(x).data, -gamma, gamma)
    return D.log_density(D.uniform_box(np.full(d, -gamma), np.full(d, gamma)), xs)


def prior_z_sample(model: Model, u) -> np.ndarray:
    """Map U(0,1) noise onto the z prior support."""
    c = model.config
    return c.z_lo + (c.z_hi - c.z_lo) * np.asarray(u, dtype=np.float64)


def _open(y) -> np.ndarray:
    return D.project_open_simplex(_rows(y))


# -- forward bounds -----------------------------------------------------------------


def elbo_forward_labeled(model: Model, params, x, y, noise, samples: int = 1) -> ElboEstimate:
    """log p(x|y,z) - log q(z|x,y) + log p(y) + log p(z),  z ~ q(z|x,y)."""
    x, y = _rows(x), _rows(y)
    n = x.shape[0]
    xs, ys = _repeat(x, samples), _repeat(y, samples)
    qz = model.encode_z(params, xs, ys)
    z = D.rsample(qz, noise["z_eps"])
    terms = {
        "log_px": _checked("log_px", lambda: D.log_density(model.decode_x(params, ys, z), xs)),
        "neg_log_qz": _checked("neg_log_qz", lambda: -D.log_density(qz, z)),
        "log_py": _checked("log_py", lambda: log_prior_y(model, ys)),
        "log_pz": _checked("log_pz", lambda: log_prior_z(model, z)),
    }
    return _estimate(terms, n, samples, noise)


def elbo_forward_unlabeled(model: Model, params, x, noise, samples: int = 1) -> ElboEstimate:
    """log p(x|y,z) - log q(y|x) - log q(z|x,y) + log p(y) + log p(z),  (y,z) ~ q."""
    x = _rows(x)
    n = x.shape[0]
    xs = _repeat(x, samples)
    qy = model.encode_y(params, xs)
    y = D.rsample(qy, noise["y_eps"])
    qz = model.encode_z(params, xs, y)
    z = D.rsample(qz, noise["z_eps"])
    terms = {
        "log_px": _checked("log_px", lambda: D.log_density(model.decode_x(params, y, z), xs)),
        "neg_log_qy": _checked("neg_log_qy", lambda: -D.log_density(qy, y)),
        "neg_log_qz": _checked("neg_log_qz", lambda: -D.log_density(qz, z)),
        "log_py": _checked("log_py", lambda: log_prior_y(model, y.data)),
        "log_pz": _checked("log_pz", lambda: log_prior_z(model, z)),
    }
    return _estimate(terms, n, samples, noise)


# -- reverse bounds -------------------------------------------------------------------


def elbo_reverse_labeled(
    model: Model, params, x, y, noise, gamma: float = DEFAULT_GAMMA, samples: int = 1
) -> ElboEstimate:
    """log q(y|x) + log q(z|x,y) - log p(z) + log q(x),  z ~ p(z)."""
    x, y = _rows(x), _rows(y)
    n = x.shape[0]
    xs, ys = _repeat(x, samples), _repeat(y, samples)
    z = prior_z_sample(model, noise["z_prior"])
    terms = {
        "log_qy": _checked("log_qy", lambda: D.log_density(model.encode_y(params, xs), _open(ys))),
        "log_qz": _checked("log_qz", lambda: D.log_density(model.encode_z(params, xs, ys), z)),
        "neg_log_pz": _checked("neg_log_pz", lambda: -log_prior_z(model, z)),
        "log_qx": _checked("log_qx", lambda: log_q_x(model, xs, gamma)),
    }
    return _estimate(terms, n, samples, noise)


def elbo_reverse_unfeatured(
    model: Model,
    params,
    y,
    noise,
    variant: str = "observed_z",
    z_obs=None,
    gamma: float = DEFAULT_GAMMA,
    samples: int = 1,
) -> ElboEstimate:
    """Bound on log q(y) (or log q(y, z) when z is observed) for labels without x.

    latent_z:   z ~ p(z), x ~ p(x|y,z);
                log q(y|x) + log q(z|x,y) - log p(z) - log p(x|y,z) + log q(x)
    observed_z: z given, x ~ p(x|y,z); same terms without -log p(z)
    aux_z:      z ~ q(z|y), x ~ p(x|y,z); -log q(z|y) in place of -log p(z)
    """
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}")
    y = _rows(y)
    n = y.shape[0]
    ys = _repeat(y, samples)
    terms: dict[str, Tensor] = {}
    if variant == "latent_z":
        z = Tensor(prior_z_sample(model, noise["z_prior"]))
    elif variant == "observed_z":
        if z_obs is None:
            raise ContractViolation("observed_z variant needs the unfeatured z values")
        z = Tensor(_repeat(_rows(z_obs), samples))
    else:
        if not model.config.use_aux:
            raise ContractViolation("aux_z variant needs model.use_aux = true")
        qa = model.aux_z(params, ys)
        z = D.rsample(qa, noise["z_eps"])
    px = model.decode_x(params, ys, z)
    x = D.rsample(px, noise["x_eps"])
    terms["log_qy"] = _checked("log_qy", lambda: D.log_density(model.encode_y(params, x), _open(ys)))
    terms["log_qz"] = _checked("log_qz", lambda: D.log_density(model.encode_z(params, x, ys), z))
    if variant == "latent_z":
        terms["neg_log_pz"] = _checked("neg_log_pz", lambda: -log_prior_z(model, z))
    elif variant == "aux_z":
        terms["neg_log_qz_aux"] = _checked("neg_log_qz_aux", lambda: -D.log_density(qa, z))
    terms["neg_log_px"] = _checked("neg_log_px", lambda: -D.log_density(px, x))
    terms["log_qx"] = _checked("log_qx", lambda: log_q_x(model, x, gamma))
    return _estimate(terms, n, samples, noise)


def aux_consistency_kl(model: Model, params, y, noise, sample_count: int) -> Tensor:
    """Monte Carlo KL(q(z|y) || (1/S) sum_s q(z|x_s, y)).

    z_s ~ q(z|y) and x_s ~ p(x|y, z_s); the same z_s are the evaluation
    points of the outer expectation.  Noise: ``z_eps`` (N*S, z_dim) and
    ``x_eps`` (N*S, x_dim), rows grouped by label.  Returns the mean over labels.
    """
    if sample_count < 1:
        raise ContractViolation("sample_count must be at least 1")
    y = _rows(y)
    n, s = y.shape[0], int(sample_count)
    d = model.config.z_dim
    ys = _repeat(y, s)
    qa = model.aux_z(params, ys)
    z = D.rsample(qa, noise["z_eps"])
    x = D.rsample(model.decode_x(params, ys, z), noise["x_eps"])
    qz = model.encode_z(params, x, ys)
    zj = z.reshape(n, s, 1, d)
    m = as_tensor(qz["mu"]).reshape(n, 1, s, d)
    lv = as_tensor(qz["logvar"]).reshape(n, 1, s, d)
    comp = tsum(lv + (zj - m) * (zj - m) / exp(lv) + D.LOG_2PI, axis=-1) * -0.5
    log_mix = logsumexp(comp, axis=-1) - math.log(s)
    log_aux = D.log_density(qa, z).reshape(n, s)
    return tmean(log_aux - log_mix)


# -- discriminative losses ------------------------------------------------------------


def discriminative_losses(model: Model, params, x, y, noise) -> tuple[Tensor, Tensor]:
    """Per-row (KL(y || y_bar), ||x_bar - x||^2).

    y_bar is the mean head of q(y|x); x_bar is the decoder mean at (y, z)
    with z ~ p(z) drawn from ``noise['z_prior']``.
    """
    x, y = _rows(x), _rows(y)
    y_bar = model.predict_y(params, x)
    loss_y = D.kl_categorical(y, y_bar)
    z = prior_z_sample(model, noise["z_prior"])
    x_bar = model.decode_x(params, y, z).mean()
    r = x_bar - x
    loss_x = tsum(r * r, axis=-1)
    return loss_y, loss_x


# -- combined objective -------------------------------------------------------------------


@dataclass
class Batch:
    labeled_x: np.ndarray | None = None
    labeled_y: np.ndarray | None = None
    unlabeled_x: np.ndarray | None = None
    unfeatured_y: np.ndarray | None = None
    unfeatured_z: np.ndarray | None = None

    @staticmethod
    def _n(a) -> int:
        return 0 if a is None else len(a)

    @property
    def n_labeled(self) -> int:
        return self._n(self.labeled_x)

    @property
    def n_unlabeled(self) -> int:
        return self._n(self.unlabeled_x)

    @property
    def n_unfeatured(self) -> int:
        return self._n(self.unfeatured_y)


def noise_spec(model: Model, batch: Batch, variant: str = "observed_z", samples: int = 1) -> dict:
    """Names, kinds and shapes of every noise array total_objective consumes."""
    c = model.config
    spec = {}
    nl, nu, nf = batch.n_labeled, batch.n_unlabeled, batch.n_unfeatured
    if nl:
        spec["l_z_eps"] = ("normal", (nl * samples, c.z_dim))
        spec["l_z_prior"] = ("uniform", (nl * samples, c.z_dim))
    if nu:
        spec["u_y_eps"] = (model.y_noise_kind(), (nu * samples, c.y_dim))
        spec["u_z_eps"] = ("normal", (nu * samples, c.z_dim))
    if nf:
        if variant == "latent_z":
            spec["f_z_prior"] = ("uniform", (nf * samples, c.z_dim))
        elif variant == "aux_z":
            spec["f_z_eps"] = ("normal", (nf * samples, c.z_dim))
        spec["f_x_eps"] = (model.x_noise_kind(), (nf * samples, c.x_dim))
    return spec


@dataclass
class ObjectiveResult:
    J: Tensor
    metrics: dict[str, float]
    warnings: list[str] = field(default_factory=list)


METRIC_NAMES = ("J", "elbo_fxy", "elbo_fx", "elbo_rxy", "elbo_ry", "loss_y", "loss_x")


def total_objective(
    model: Model,
    params,
    batch: Batch,
    coeffs: ObjectiveCoefficients,
    noise,
    variant: str = "observed_z",
    gamma: float = DEFAULT_GAMMA,
    samples: int = 1,
) -> ObjectiveResult:
    """J = a_f J_f - a_f^d J_f^d + a_r J_r - a_r^d J_r^d on one mini-batch.

    Every term, discriminative losses included, is summed over rows, so each
    item contributes once.  The loss metrics are reported as per-row means.
    Terms whose coefficient is zero are skipped and reported as NaN.
    """
    metrics = {name: float("nan") for name in METRIC_NAMES}
    if batch.n_labeled + batch.n_unlabeled + batch.n_unfeatured == 0:
        msg = "empty batch: objective is 0"
        log.warning(msg)
        metrics["J"] = 0.0
        return ObjectiveResult(Tensor(0.0), metrics, [msg])

    J = Tensor(0.0)
    if batch.n_labeled:
        x, y = batch.labeled_x, batch.labeled_y
        if coeffs.alpha_f:
            e7 = elbo_forward_labeled(model, params, x, y, {"z_eps": noise["l_z_eps"]}, samples)
            s = e7.total()
            metrics["elbo_fxy"] = s.item()
            J = J + coeffs.alpha_f * s
        if coeffs.alpha_f_d or coeffs.alpha_r_d:
            loss_y, loss_x = discriminative_losses(
                model, params, x, y, {"z_prior": noise["l_z_prior"][::samples]}
            )
            metrics["loss_y"] = float(loss_y.data.mean())
            metrics["loss_x"] = float(loss_x.data.mean())
            if coeffs.alpha_f_d:
                J = J - coeffs.alpha_f_d * tsum(loss_y)
        if coeffs.alpha_r:
            e9 = elbo_reverse_labeled(
                model, params, x, y, {"z_prior": noise["l_z_prior"]}, gamma, samples
            )
            s = e9.total()
            metrics["elbo_rxy"] = s.item()
            J = J + coeffs.alpha_r * s
        if coeffs.alpha_r_d:
            J = J - coeffs.alpha_r_d * tsum(loss_x)
    if batch.n_unlabeled and coeffs.alpha_f:
        e8 = elbo_forward_unlabeled(
            model,
            params,
            batch.unlabeled_x,
            {"y_eps": noise["u_y_eps"], "z_eps": noise["u_z_eps"]},
            samples,
        )
        s = e8.total()
        metrics["elbo_fx"] = s.item()
        J = J + coeffs.alpha_f * s
    if batch.n_unfeatured and (coeffs.alpha_r or (variant == "aux_z" and coeffs.aux_consistency)):
        sub = {"x_eps": noise["f_x_eps"]}
        if variant == "latent_z":
            sub["z_prior"] = noise["f_z_prior"]
        elif variant == "aux_z":
            sub["z_eps"] = noise["f_z_eps"]
        if coeffs.alpha_r:
            e10 = elbo_reverse_unfeatured(
                model, params, batch.unfeatured_y, sub, variant, batch.unfeatured_z, gamma, samples
            )
            s = e10.total()
            metrics["elbo_ry"] = s.item()
            J = J + coeffs.alpha_r * s
        if variant == "aux_z" and coeffs.aux_consistency:
            kl = aux_consistency_kl(model, params, batch.unfeatured_y, sub, samples)
            J = J - coeffs.aux_consistency * kl
    metrics["J"] = J.item()
    return ObjectiveResult(J, metrics)
