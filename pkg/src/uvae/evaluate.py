"""Post-training evaluation: composition KL, endmember error, digit grids,
nuisance analysis and the grouped leave-p-out protocol."""
from __future__ import annotations

import json
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from .distributions import ETA, kl_categorical
from .model import Model

Z_POLICIES = ("prior-mean", "dataset-mean")
OUTLIER_MADS = 5.0


# -- reports -----------------------------------------------------------------------------


@dataclass
class MetricReport:
    metrics: dict
    per_item: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not math.isfinite(float(v)):
                raise ValueError(f"metric {k!r} is not finite")

    def to_dict(self) -> dict:
        return {
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "per_item": self.per_item,
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


# -- composition scores ------------------------------------------------------------------


def kl_per_item(pred, truth, eta: float = ETA) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length/shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return np.atleast_1d(kl_categorical(truth, pred, eta).data)


def composition_kl(pred, truth, eta: float = ETA) -> float:
    """Mean over items of KL(truth || pred), with pred floored at ``eta``."""
    return float(kl_per_item(pred, truth, eta).mean())


def predict_composition(model: Model, params, x) -> np.ndarray:
    return model.predict_y(params, np.asarray(x, dtype=np.float64)).data


def aligned_composition_kl(pred, truth, free: Sequence[int], eta: float = ETA) -> tuple[float, list[int]]:
    """KL after relabeling the ``free`` output dimensions by the assignment that
    maximizes agreement with ``truth`` (the others stay fixed).

    Returns the KL and the permutation applied to the prediction columns.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    free = list(free)
    # cost[i, j]: expected cross-entropy if prediction column free[j] stands for class free[i]
    logp = np.log(np.maximum(pred[:, free], eta))
    cost = -(truth[:, free].T @ logp)
    rows, cols = linear_sum_assignment(cost)
    perm = list(range(pred.shape[1]))
    for r, c in zip(rows, cols):
        perm[free[r]] = free[c]
    return composition_kl(pred[:, perm], truth, eta), perm


# -- nuisance reference point ----------------------------------------------------------


def resolve_z(model: Model, params, policy: str = "dataset-mean", x=None, y=None) -> np.ndarray:
    """Reference nuisance value: the prior mean, or the mean over labeled pairs of
    the mean of q(z|x, y)."""
    c = model.config
    if policy == "prior-mean":
        return np.full(c.z_dim, 0.5 * (c.z_lo + c.z_hi))
    if policy != "dataset-mean":
        raise ValueError(f"z_policy must be one of {Z_POLICIES}")
    if x is None or len(x) == 0:
        raise ValueError("dataset-mean z_policy needs labeled pairs")
    if y is None:
        y = predict_composition(model, params, x)
    z = model.encode_z(params, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)).mean().data
    return np.clip(z.mean(axis=0), c.z_lo, c.z_hi)


# -- endmembers --------------------------------------------------------------------------


def extract_endmembers(model: Model, params, z, standardization=None) -> np.ndarray:
    """Decoder means at each one-hot corner and the reference z, in original units."""
    K = model.config.y_dim
    zz = np.tile(np.asarray(z, dtype=np.float64).reshape(1, -1), (K, 1))
    xbar = model.generate_conditional(params, np.eye(K), zz, mode="mean").data
    return standardization.inverse(xbar) if standardization is not None else xbar


def endmember_error(model: Model, params, true_signatures, z, standardization=None) -> dict:
    """Per-endmember L2 distance between the extracted and true signatures."""
    sig = np.asarray(true_signatures, dtype=np.float64)
    xbar = extract_endmembers(model, params, z, standardization)
    if xbar.shape != sig.shape:
        raise ValueError(f"signature shape {sig.shape} does not match model output {xbar.shape}")
    per = np.linalg.norm(xbar - sig, axis=1)
    return {"per_endmember": per.tolist(), "mean": float(per.mean())}


# -- digit grids -------------------------------------------------------------------------


def write_pgm(path, image) -> Path:
    """8-bit binary PGM of an array with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    pix = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    h, w = pix.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def digit_grid(
    model: Model,
    params,
    z,
    mode: str = "mean",
    seed: int = 0,
    columns: int = 8,
    image_shape=(28, 28),
) -> np.ndarray:
    """Row k shows images generated from one-hot e_k at the reference z.

    Mean mode shows decoder means (pixel probabilities for a Bernoulli decoder);
    sample mode draws hard samples from p(x|y, z).
    """
    K = model.config.y_dim
    h, w = image_shape
    if h * w != model.config.x_dim:
        raise ValueError(f"image_shape {image_shape} does not match x_dim {model.config.x_dim}")
    y = np.repeat(np.eye(K), columns, axis=0)
    zz = np.tile(np.asarray(z, dtype=np.float64).reshape(1, -1), (len(y), 1))
    px = model.decode_x(params, y, zz)
    mean = px.mean().data
    if mode == "mean":
        imgs = mean
    elif mode == "sample":
        rng = np.random.default_rng(seed)
        if px.family == "Bernoulli":
            imgs = (rng.random(mean.shape) < mean).astype(np.float64)
        else:
            imgs = mean + np.exp(0.5 * px["logvar"].data) * rng.standard_normal(mean.shape)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    grid = imgs.reshape(K, columns, h, w).transpose(0, 2, 1, 3).reshape(K * h, columns * w)
    return grid


# -- nuisance analysis -------------------------------------------------------------------


def pca_project(x, n_components: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Scores on the leading principal axes (eigendecomposition of the covariance)."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    axes = vecs[:, order]
    # fix the sign so the largest-magnitude loading is positive
    flip = np.sign(axes[np.argmax(np.abs(axes), axis=0), np.arange(axes.shape[1])])
    axes = axes * np.where(flip == 0, 1.0, flip)
    return xc @ axes, vals[order]


def nuisance_values(model: Model, params, x, noise=None) -> np.ndarray:
    """Per-item nuisance: the mean of q(z|x, ybar), or a sample when noise is given."""
    x = np.asarray(x, dtype=np.float64)
    if noise is not None:
        return model.infer_nuisance(params, x, noise=noise).data
    ybar = predict_composition(model, params, x)
    return model.clamp_z(model.encode_z(params, x, ybar).mean()).data


def _mad(v: np.ndarray) -> float:
    return float(np.median(np.abs(v - np.median(v))))


def nuisance_analysis(
    model: Model,
    params,
    x,
    config_ids,
    levels=None,
    noise=None,
    threshold: float = OUTLIER_MADS,
    component: int = 0,
) -> dict:
    """Per-configuration nuisance medians, MAD-based outlier flags and a 3-PC projection.

    An item is flagged when its nuisance lies more than ``threshold`` MADs from
    the median of its own configuration.
    """
    config_ids = np.asarray(config_ids)
    z = nuisance_values(model, params, x, noise)[:, component]
    configs = np.unique(config_ids)
    medians, mads = {}, {}
    flags = np.zeros(len(z), dtype=bool)
    for c in configs:
        sel = config_ids == c
        med, mad = float(np.median(z[sel])), _mad(z[sel])
        medians[int(c)], mads[int(c)] = med, mad
        flags[sel] = np.abs(z[sel] - med) > threshold * max(mad, 1e-12)
    out = {
        "z": z,
        "medians": medians,
        "mads": mads,
        "outliers": flags,
        "pca": pca_project(x, min(3, np.asarray(x).shape[1]))[0],
    }
    meds = np.array([medians[int(c)] for c in configs])
    gaps = np.abs(meds[:, None] - meds[None, :])[np.triu_indices(len(meds), 1)]
    out["separation"] = float(gaps.min() / max(max(mads.values()), 1e-12)) if len(gaps) else float("nan")
    if levels is not None and len(configs) > 2:
        lv = np.asarray(levels, dtype=np.float64)[configs]
        # identical medians carry no ordering
        out["spearman"] = float(spearmanr(lv, meds).statistic) if np.ptp(meds) > 0 else 0.0
    return out


def outlier_rates(flags, truth) -> tuple[float, float]:
    """(recall, false-positive rate) of boolean flags against planted truth."""
    flags = np.asarray(flags, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    recall = float(flags[truth].mean()) if truth.any() else float("nan")
    fpr = float(flags[~truth].mean()) if (~truth).any() else float("nan")
    return recall, fpr


def write_nuisance_csv(path, analysis: dict, config_ids) -> Path:
    lines = ["row,config,z,outlier,pc1,pc2,pc3"]
    pca = analysis["pca"]
    for i, (c, z, o) in enumerate(zip(config_ids, analysis["z"], analysis["outliers"])):
        pcs = [repr(float(v)) for v in pca[i]] + [""] * (3 - pca.shape[1])
        lines.append(",".join([str(i), str(int(c)), repr(float(z)), str(int(o))] + pcs))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


# -- grouped leave-p-out -----------------------------------------------------------------

Runner = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class LeakageError(AssertionError):
    pass


def grouped_leave_p_out(
    x,
    y,
    groups,
    train_groups,
    eval_groups,
    runner: Runner,
    config: dict | None = None,
    seed: int | None = None,
    name: str = "model",
) -> MetricReport:
    """Fit on the rows of ``train_groups`` and score composition KL on ``eval_groups``.

    ``runner(train_x, train_y, eval_x)`` returns compositions for ``eval_x``;
    it is handed read-only copies of the training rows only.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    groups = np.asarray(groups)
    tr, ev = set(train_groups), set(eval_groups)
    if tr & ev:
        raise ValueError(f"train and eval groups overlap: {sorted(tr & ev)}")
    if not tr or not ev:
        raise ValueError("train and eval group sets must be non-empty")
    tr_idx = np.flatnonzero(np.isin(groups, list(tr)))
    ev_idx = np.flatnonzero(np.isin(groups, list(ev)))
    if np.intersect1d(tr_idx, ev_idx).size:
        raise LeakageError("an eval row appears in the training rows")
    tx, ty = x[tr_idx].copy(), y[tr_idx].copy()
    tx.flags.writeable = False
    ty.flags.writeable = False
    pred = np.asarray(runner(tx, ty, x[ev_idx].copy()), dtype=np.float64)
    kl = kl_per_item(pred, y[ev_idx])
    per_item = [
        {"row": int(i), "group": int(groups[i]), "kl": float(k)} for i, k in zip(ev_idx, kl)
    ]
    per_group = {int(g): float(kl[groups[ev_idx] == g].mean()) for g in sorted(ev)}
    return MetricReport(
        metrics={"composition_kl": float(kl.mean()), **{f"kl_group_{g}": v for g, v in per_group.items()}},
        per_item=per_item,
        config={
            "runner": name,
            "train_groups": sorted(int(g) for g in tr),
            "eval_groups": sorted(int(g) for g in ev),
            "train_rows": tr_idx.tolist(),
            "eval_rows": ev_idx.tolist(),
            **(config or {}),
        },
        seed=seed,
    )
