"""Mini-batch training loop: clipped Adam on the negated combined objective."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .diffcore import ContractViolation, NonFiniteError, ParamSet, value_and_grad
from .distributions import NoiseStream
from .model import Model, save_checkpoint
from .objectives import (
    DEFAULT_GAMMA,
    METRIC_NAMES,
    VARIANTS,
    Batch,
    ObjectiveCoefficients,
    noise_spec,
    total_objective,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "epoch") + METRIC_NAMES


class TrainingDiverged(RuntimeError):
    pass


# -- optimizer -------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-4
    clip: float = 1.0

    @classmethod
    def zeros_like(cls, params: Mapping, **settings) -> OptimizerState:
        zeros = {k: np.zeros_like(np.asarray(v)) for k, v in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, **settings)


def adam_update(state: OptimizerState, grads: Mapping) -> tuple[OptimizerState, dict]:
    """One Adam step on gradients clipped elementwise into [-clip, clip].

    Returns the new state and the additive parameter increment
    ``-lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"adam_update: non-finite gradient for {', '.join(bad)}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    m, v, inc = {}, {}, {}
    for k, g in grads.items():
        g = np.clip(g, -state.clip, state.clip)
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        inc[k] = -state.learning_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return replace(state, m=m, v=v, step=t), inc


# -- configuration -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 100
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-4
    clip: float = 1.0
    coefficients: dict = field(default_factory=lambda: ObjectiveCoefficients().to_dict())
    variant: str = "observed_z"
    mc_samples: int = 1
    gamma: float = DEFAULT_GAMMA
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    divergence_ceiling: float = 1e12

    def __post_init__(self):
        for name in ("batch_size", "epochs", "mc_samples", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"train.{name} must be positive")
        if self.checkpoint_every < 0:
            raise ContractViolation("train.checkpoint_every must be >= 0")
        if self.variant not in VARIANTS:
            raise ContractViolation(f"train.variant must be one of {VARIANTS}")
        if not self.learning_rate > 0:
            raise ContractViolation("train.learning_rate must be positive")
        self.coeffs  # validates

    @property
    def coeffs(self) -> ObjectiveCoefficients:
        try:
            return ObjectiveCoefficients.from_dict(self.coefficients)
        except (ContractViolation, TypeError) as exc:
            raise ContractViolation(f"train.coefficients: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ContractViolation(f"unknown train config field {key!r}")
        return cls(**d)

    def optimizer(self, params: ParamSet) -> OptimizerState:
        return OptimizerState.zeros_like(
            params,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            clip=self.clip,
        )


def seed_streams(seed: int) -> tuple[int, int, int]:
    """Independent sub-seeds for (initialization, batching, noise)."""
    ss = np.random.SeedSequence(int(seed))
    return tuple(int(c.generate_state(1)[0]) for c in ss.spawn(3))


# -- batching ----------------------------------------------------------------------------


class _Cycler:
    """Endless reshuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            j = min(k, self.n - self.pos)
            out.append(self.perm[self.pos : self.pos + j])
            self.pos += j
            k -= j
        return np.concatenate(out)


class MiniBatcher:
    """Draws ``batch_size`` rows from each non-empty sub-collection per step.

    An epoch is one pass over the labeled rows (or over the first non-empty
    collection when there are none).  The smaller collections cycle with
    their own shuffles.
    """

    def __init__(self, dataset, batch_size: int, rng: np.random.Generator):
        self.ds = dataset
        self.B = int(batch_size)
        self.rng = rng
        sizes = {
            "labeled": len(dataset.labeled_x),
            "unlabeled": len(dataset.unlabeled_x),
            "unfeatured": len(dataset.unfeatured_y),
        }
        if not any(sizes.values()):
            raise ContractViolation("dataset has no rows in any sub-collection")
        self.driver = next(k for k in ("labeled", "unlabeled", "unfeatured") if sizes[k])
        self.sizes = sizes
        self.cyclers = {k: _Cycler(n, rng) for k, n in sizes.items() if n and k != self.driver}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.sizes[self.driver] / self.B)

    def epoch(self):
        """Yield (Batch, index dict) for one epoch."""
        perm = self.rng.permutation(self.sizes[self.driver])
        for start in range(0, len(perm), self.B):
            idx = {self.driver: perm[start : start + self.B]}
            for k, c in self.cyclers.items():
                idx[k] = c.take(self.B)
            yield self._gather(idx), idx

    def _gather(self, idx: dict) -> Batch:
        ds = self.ds
        b = Batch()
        if "labeled" in idx:
            b.labeled_x = ds.labeled_x[idx["labeled"]]
            b.labeled_y = ds.labeled_y[idx["labeled"]]
        if "unlabeled" in idx:
            b.unlabeled_x = ds.unlabeled_x[idx["unlabeled"]]
        if "unfeatured" in idx:
            b.unfeatured_y = ds.unfeatured_y[idx["unfeatured"]]
            if ds.unfeatured_z is not None:
                b.unfeatured_z = ds.unfeatured_z[idx["unfeatured"]]
        return b


# -- steps -------------------------------------------------------------------------------


def train_step(
    model: Model,
    params: ParamSet,
    state: OptimizerState,
    batch: Batch,
    coeffs: ObjectiveCoefficients,
    noise,
    variant: str = "observed_z",
    gamma: float = DEFAULT_GAMMA,
    samples: int = 1,
) -> tuple[ParamSet, OptimizerState, dict]:
    """Gradient of -J, a clipped Adam step, and the pre-update metrics."""
    box = {}

    def neg_j(p):
        res = total_objective(model, p, batch, coeffs, noise, variant, gamma, samples)
        box["metrics"] = res.metrics
        return -res.J

    _, grads = value_and_grad(neg_j, params)
    state, inc = adam_update(state, grads)
    new = params.replace({k: params[k] + inc[k] for k in params})
    return new, state, box["metrics"]


@dataclass
class TrainResult:
    params: ParamSet
    log: list[dict]
    state: OptimizerState
    checkpoints: list[Path] = field(default_factory=list)


def run_training(
    model: Model,
    config: TrainConfig,
    dataset,
    params: ParamSet | None = None,
    out_dir=None,
) -> TrainResult:
    """Run ``config.epochs`` epochs; fully determined by (seed, config, dataset)."""
    init_seed, batch_seed, noise_seed = seed_streams(config.seed)
    if params is None:
        params = model.init_params(init_seed)
    state = config.optimizer(params)
    coeffs = config.coeffs
    batcher = MiniBatcher(dataset, config.batch_size, np.random.default_rng(batch_seed))
    noise = NoiseStream(noise_seed)
    rows: list[dict] = []
    checkpoints: list[Path] = []
    over = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        for batch, _ in batcher.epoch():
            draw = noise.draw(noise_spec(model, batch, config.variant, config.mc_samples))
            try:
                params, state, metrics = train_step(
                    model, params, state, batch, coeffs, draw,
                    config.variant, config.gamma, config.mc_samples,
                )
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step + 1}: {exc}") from exc
            step += 1
            if step % config.log_every == 0:
                rows.append({"step": step, "epoch": epoch, **metrics})
                J = metrics["J"]
                if not math.isfinite(J):
                    raise TrainingDiverged(f"step {step}: J is not finite")
                over = over + 1 if abs(J) > config.divergence_ceiling else 0
                if over >= 10:
                    raise TrainingDiverged(
                        f"step {step}: |J| above {config.divergence_ceiling:g} for 10 logs"
                    )
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            path, _ = save_checkpoint(out_dir, model.config, params, name=f"checkpoint_epoch{epoch}")
            checkpoints.append(path)
    return TrainResult(params, rows, state, checkpoints)


def format_metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in METRIC_NAMES])
    return buf.getvalue()


def write_metrics_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(format_metrics_csv(rows))
    return path


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()})
        return out
