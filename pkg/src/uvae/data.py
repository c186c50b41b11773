"""Synthetic spectral mixtures, split protocols, IDX files and dataset I/O."""
from __future__ import annotations

import gzip
import itertools
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# incidence angles of the three acquisition geometries (Position 1, Position 2, Angle 2)
INCIDENCE_ANGLES = (33.9, 42.7, 12.7)
LEVEL_SLOPE = 0.01
CONTAINER_REFLECTANCE = 0.95
CONTAINER_BLEND = 0.6
SIMPLEX_TOL = 1e-9


def default_levels(angles=INCIDENCE_ANGLES, slope: float = LEVEL_SLOPE) -> list[float]:
    """Multiplicative distortion per configuration, mean 1, gaps proportional to angle gaps."""
    a = np.asarray(angles, dtype=np.float64)
    return list(1.0 + slope * (a - a.mean()))


# -- datasets -------------------------------------------------------------------------


@dataclass
class Standardization:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> Standardization:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def _empty(d: int) -> np.ndarray:
    return np.zeros((0, d))


@dataclass
class Dataset:
    """Labeled pairs, unlabeled observations and unfeatured labels (with optional z)."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unfeatured_y: np.ndarray
    unfeatured_z: np.ndarray | None = None
    standardization: Standardization | None = None
    meta: dict = field(default_factory=dict)

    @property
    def x_dim(self) -> int:
        return self.labeled_x.shape[1] if len(self.labeled_x) else self.unlabeled_x.shape[1]

    @property
    def y_dim(self) -> int:
        return self.labeled_y.shape[1] if len(self.labeled_y) else self.unfeatured_y.shape[1]

    def all_x(self) -> np.ndarray:
        return np.concatenate([self.labeled_x, self.unlabeled_x])

    def validate(self, z_lo: float = -1.5, z_hi: float = 1.5) -> None:
        for name in ("labeled_y", "unfeatured_y"):
            y = getattr(self, name)
            if len(y) and (np.any(y < -SIMPLEX_TOL) or np.any(np.abs(y.sum(1) - 1.0) > SIMPLEX_TOL)):
                raise ValueError(f"{name} rows must lie on the simplex")
        for name in ("labeled_x", "unlabeled_x"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if len(self.labeled_x) != len(self.labeled_y):
            raise ValueError("labeled_x and labeled_y lengths differ")
        if self.unfeatured_z is not None:
            if len(self.unfeatured_z) != len(self.unfeatured_y):
                raise ValueError("unfeatured_z and unfeatured_y lengths differ")
            if np.any(self.unfeatured_z < z_lo) or np.any(self.unfeatured_z > z_hi):
                raise ValueError("unfeatured_z outside the z prior support")

    # -- on-disk form: one CSV per sub-collection + meta.json
    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        C, K = self.x_dim, self.y_dim
        xs = [f"x{i}" for i in range(C)]
        ys = [f"y{i}" for i in range(K)]
        zs = [] if self.unfeatured_z is None else [f"z{i}" for i in range(self.unfeatured_z.shape[1])]
        written = [
            _write_csv(d / "labeled.csv", xs + ys, np.hstack([self.labeled_x, self.labeled_y])),
            _write_csv(d / "unlabeled.csv", xs, self.unlabeled_x),
        ]
        fz = self.unfeatured_y if self.unfeatured_z is None else np.hstack([self.unfeatured_y, self.unfeatured_z])
        written.append(_write_csv(d / "unfeatured.csv", ys + zs, fz))
        meta = {
            "x_dim": C,
            "y_dim": K,
            "z_dim": len(zs),
            "standardization": None if self.standardization is None else self.standardization.to_dict(),
            **self.meta,
        }
        (d / "meta.json").write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
        written.append(d / "meta.json")
        return written

    @classmethod
    def load(cls, directory) -> Dataset:
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        C, K, Z = meta.pop("x_dim"), meta.pop("y_dim"), meta.pop("z_dim")
        std = meta.pop("standardization")
        lab = _read_csv(d / "labeled.csv", C + K)
        unl = _read_csv(d / "unlabeled.csv", C)
        unf = _read_csv(d / "unfeatured.csv", K + Z)
        return cls(
            labeled_x=lab[:, :C],
            labeled_y=lab[:, C:],
            unlabeled_x=unl,
            unfeatured_y=unf[:, :K],
            unfeatured_z=unf[:, K:] if Z else None,
            standardization=None if std is None else Standardization.from_dict(std),
            meta=meta,
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_csv(path: Path, header: list[str], arr: np.ndarray) -> Path:
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) for v in row) for row in arr]
    path.write_text("\n".join(lines) + "\n")
    return path


def _read_csv(path: Path, width: int) -> np.ndarray:
    rows = path.read_text().splitlines()[1:]
    if not rows:
        return np.zeros((0, width))
    return np.array([[float(v) for v in r.split(",")] for r in rows if r], dtype=np.float64).reshape(-1, width)


def standardize(dataset: Dataset) -> Dataset:
    """Per-channel zero-mean / unit-scale x, fitted on labeled and unlabeled rows."""
    x = dataset.all_x()
    if not len(x):
        raise ValueError("standardize needs at least one x row")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    flat = scale == 0.0
    if np.any(flat):
        warnings.warn(f"zero-variance channels {np.flatnonzero(flat).tolist()} keep scale 1", RuntimeWarning, stacklevel=2)
        scale = np.where(flat, 1.0, scale)
    std = Standardization(mean, scale)
    return Dataset(
        labeled_x=std.transform(dataset.labeled_x),
        labeled_y=dataset.labeled_y,
        unlabeled_x=std.transform(dataset.unlabeled_x),
        unfeatured_y=dataset.unfeatured_y,
        unfeatured_z=dataset.unfeatured_z,
        standardization=std,
        meta=dict(dataset.meta),
    )


# -- synthetic mixtures ------------------------------------------------------------------


@dataclass
class MixtureSpec:
    n_endmembers: int = 3
    channels: int = 32
    resolution: int = 10
    levels: list = field(default_factory=default_levels)
    noise: float = 0.005
    mixing: str = "nonlinear"
    jitter: float = 0.02
    replicates: int = 1
    outlier_fraction: float = 0.0
    signatures: list | None = None

    def __post_init__(self):
        if self.n_endmembers < 2:
            raise ValueError("n_endmembers must be at least 2")
        if self.mixing not in ("linear", "nonlinear"):
            raise ValueError("mixing must be 'linear' or 'nonlinear'")
        if self.channels < 1 or self.resolution < 1 or self.replicates < 1:
            raise ValueError("channels, resolution and replicates must be positive")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")

    @property
    def grid_size(self) -> int:
        return math.comb(self.resolution + self.n_endmembers - 1, self.n_endmembers - 1)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d) -> MixtureSpec:
        known = {f.name for f in fields(cls)}
        bad = [k for k in d if k not in known]
        if bad:
            raise ValueError(f"unknown mixture field {bad[0]!r}")
        return cls(**d)


@dataclass
class SampleTable:
    abundance: np.ndarray
    nominal: np.ndarray
    nominal_index: np.ndarray
    config: np.ndarray
    x: np.ndarray
    outlier: np.ndarray
    signatures: np.ndarray
    levels: np.ndarray
    grid: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def simplex_grid(k: int, resolution: int) -> np.ndarray:
    """All compositions with components in {0, 1/r, ..., 1}; C(r+k-1, k-1) rows."""
    pts = [c for c in itertools.product(range(resolution + 1), repeat=k) if sum(c) == resolution]
    return np.array(pts[::-1], dtype=np.float64) / resolution


def make_signatures(k: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth positive spectra: 3-5 Gaussian bumps per endmember at distinct centers."""
    grid = np.linspace(0.0, 1.0, channels)
    while True:
        counts = rng.integers(3, 6, size=k)
        slots = rng.permutation(np.linspace(0.05, 0.95, int(counts.sum()) + 2))[: counts.sum()]
        sig = np.empty((k, channels))
        pos = 0
        for i, n in enumerate(counts):
            centers = slots[pos : pos + n]
            pos += n
            amps = rng.uniform(0.3, 1.0, size=n)
            widths = rng.uniform(0.04, 0.10, size=n)
            b = (amps[:, None] * np.exp(-0.5 * ((grid[None] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
            sig[i] = 0.1 + 0.8 * b / b.max()
        if np.linalg.matrix_rank(sig) == k:
            return sig


def mix_spectra(abundance: np.ndarray, signatures: np.ndarray, law: str) -> np.ndarray:
    """Linear: a @ S.  Nonlinear (geometric / intimate surrogate): exp(a @ log S)."""
    if law == "linear":
        return abundance @ signatures
    return np.exp(abundance @ np.log(signatures))


def jitter_abundance(nominal: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    if scale <= 0.0:
        return nominal.copy()
    d = rng.dirichlet(np.ones(nominal.shape[1]), size=len(nominal))
    a = (1.0 - scale) * nominal + scale * d
    return a / a.sum(axis=1, keepdims=True)


def generate_synthetic_mixtures(spec: MixtureSpec, seed: int) -> SampleTable:
    """Every grid abundance under every configuration, ``replicates`` times.

    x = mix(a) * level[c] + N(0, noise^2); ``outlier_fraction`` of the rows
    are replaced by a blend with a flat bright container spectrum.
    """
    rng = np.random.default_rng(seed)
    K, C = spec.n_endmembers, spec.channels
    sig = np.asarray(spec.signatures, dtype=np.float64) if spec.signatures is not None else make_signatures(K, C, rng)
    if sig.shape != (K, C):
        raise ValueError(f"signatures must have shape {(K, C)}")
    levels = np.asarray(spec.levels, dtype=np.float64)
    grid = simplex_grid(K, spec.resolution)
    G, L, R = len(grid), len(levels), spec.replicates
    nominal_index = np.repeat(np.arange(G), L * R)
    config = np.tile(np.repeat(np.arange(L), R), G)
    nominal = grid[nominal_index]
    abundance = jitter_abundance(nominal, spec.jitter, rng)
    clean = mix_spectra(abundance, sig, spec.mixing) * levels[config][:, None]
    x = clean + spec.noise * rng.standard_normal(clean.shape)
    outlier = np.zeros(len(x), dtype=bool)
    n_out = int(round(spec.outlier_fraction * len(x)))
    if n_out:
        rows = rng.choice(len(x), size=n_out, replace=False)
        outlier[rows] = True
        container = CONTAINER_REFLECTANCE * levels[config[rows]][:, None]
        x[rows] = (1.0 - CONTAINER_BLEND) * clean[rows] + CONTAINER_BLEND * container
        x[rows] += spec.noise * rng.standard_normal((n_out, C))
    return SampleTable(abundance, nominal, nominal_index, config, x, outlier, sig, levels, grid)


def vertex_distance(y: np.ndarray) -> np.ndarray:
    """L1 distance from each row to its nearest simplex vertex: 2 (1 - max_k y_k)."""
    return 2.0 * (1.0 - np.asarray(y).max(axis=-1))


def sample_near_vertices(n: int, k: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Points within L1 ``radius`` of a uniformly chosen vertex."""
    vert = rng.integers(0, k, size=n)
    t = rng.uniform(0.0, radius / 2.0, size=(n, 1))
    u = rng.dirichlet(np.ones(k), size=n)
    return (1.0 - t) * np.eye(k)[vert] + t * u


def draw_prior_z(n: int, z_dim: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(lo, hi, size=(n, z_dim))


def make_simplex_split(
    table: SampleTable,
    corner_radius: float = 0.15,
    counts=(500, 992, 501),
    seed: int = 0,
    unfeatured_radius: float = 0.15,
    z_dim: int | None = 1,
    z_support=(-1.5, 1.5),
) -> Dataset:
    """Labeled / unlabeled rows from grid points farther than ``corner_radius`` from
    every vertex; unfeatured labels near the vertices (with prior z when z_dim is set)."""
    n_l, n_u, n_f = (int(c) for c in counts)
    rng = np.random.default_rng(seed)
    interior = np.flatnonzero(vertex_distance(table.nominal) > corner_radius + 1e-12)
    if n_l + n_u > len(interior):
        raise ValueError(f"infeasible counts: need {n_l + n_u} interior rows, have {len(interior)}")
    chosen = rng.permutation(interior)
    lab, unl = np.sort(chosen[:n_l]), np.sort(chosen[n_l : n_l + n_u])
    K = table.abundance.shape[1]
    yu = sample_near_vertices(n_f, K, unfeatured_radius, rng)
    zu = draw_prior_z(n_f, z_dim, *z_support, rng) if z_dim else None
    return Dataset(
        labeled_x=table.x[lab],
        labeled_y=table.abundance[lab],
        unlabeled_x=table.x[unl],
        unfeatured_y=yu,
        unfeatured_z=zu,
        meta={"labeled_rows": lab.tolist(), "unlabeled_rows": unl.tolist(), "corner_radius": corner_radius},
    )


def make_partial_label_split(
    images: np.ndarray,
    labels: np.ndarray,
    labeled_digits=(0, 1, 2, 3, 4),
    counts=(1000, 1000),
    seed: int = 0,
    z_dim: int | None = 2,
    z_support=(-1.5, 1.5),
    n_classes: int = 10,
) -> Dataset:
    """Labels only for ``labeled_digits``; every image is unlabeled; unfeatured
    labels are the one-hots of all classes, replicated."""
    digits = sorted(set(int(d) for d in labeled_digits))
    if not digits:
        raise ValueError("labeled_digits must not be empty")
    if digits[0] < 0 or digits[-1] >= n_classes:
        raise ValueError(f"labeled_digits must lie in 0..{n_classes - 1}")
    n_l, n_f = (int(c) for c in counts)
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    labels = np.asarray(labels).astype(int)
    pool = np.flatnonzero(np.isin(labels, digits))
    if n_l > len(pool):
        raise ValueError(f"infeasible labeled count {n_l} (pool {len(pool)})")
    lab = np.sort(rng.choice(pool, size=n_l, replace=False))
    eye = np.eye(n_classes)
    reps = max(1, math.ceil(n_f / n_classes))
    yu = np.tile(eye, (reps, 1))
    zu = draw_prior_z(len(yu), z_dim, *z_support, rng) if z_dim else None
    return Dataset(
        labeled_x=images[lab],
        labeled_y=eye[labels[lab]],
        unlabeled_x=images.copy(),
        unfeatured_y=yu,
        unfeatured_z=zu,
        meta={"labeled_rows": lab.tolist(), "labeled_digits": digits},
    )


# -- grouped data (compound-level hold-out) -----------------------------------------------


@dataclass
class GroupedTable:
    """Repeated noisy shots of a few fixed compositions, plus an unlabeled pool."""

    x: np.ndarray
    y: np.ndarray
    group: np.ndarray
    pool_x: np.ndarray
    unfeatured_y: np.ndarray
    signatures: np.ndarray


def generate_grouped_mixtures(
    spec: MixtureSpec,
    seed: int,
    n_groups: int = 6,
    shots: int = 20,
    n_pool: int = 500,
    n_unfeatured: int = 500,
    gain_range=(0.8, 1.2),
) -> GroupedTable:
    """Group g is one composition shot ``shots`` times with a per-shot gain drawn
    uniformly from ``gain_range``."""
    rng = np.random.default_rng(seed)
    K, C = spec.n_endmembers, spec.channels
    sig = np.asarray(spec.signatures, dtype=np.float64) if spec.signatures is not None else make_signatures(K, C, rng)
    comps = rng.dirichlet(np.ones(K), size=n_groups)
    group = np.repeat(np.arange(n_groups), shots)
    y = jitter_abundance(comps[group], spec.jitter, rng)

    def shoot(a):
        gain = rng.uniform(*gain_range, size=(len(a), 1))
        clean = mix_spectra(a, sig, spec.mixing) * gain
        return clean + spec.noise * rng.standard_normal(clean.shape)

    x = shoot(y)
    pool_x = shoot(rng.dirichlet(np.ones(K), size=n_pool))
    yu = rng.dirichlet(np.ones(K), size=n_unfeatured)
    return GroupedTable(x, y, group, pool_x, yu, sig)


# -- IDX files ---------------------------------------------------------------------------


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


IDX_UBYTE = 0x08


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an integer array."""
    if len(buf) < 4:
        raise IdxParseError("file shorter than the 4-byte header", len(buf))
    for off in (0, 1):
        if buf[off] != 0:
            raise IdxParseError(f"bad magic byte 0x{buf[off]:02x}", off)
    if buf[2] != IDX_UBYTE:
        raise IdxParseError(f"unsupported type code 0x{buf[2]:02x}", 2)
    ndim = buf[3]
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxParseError("truncated dimension table", len(buf))
    shape = struct.unpack(f">{ndim}I", buf[4:head])
    size = int(np.prod(shape, dtype=np.int64))
    if len(buf) < head + size:
        raise IdxParseError(f"truncated payload: expected {size} bytes after the header", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=head).reshape(shape)


def load_idx(path, rescale: bool | None = None) -> np.ndarray:
    """Read an IDX file (optionally gzipped).

    Arrays of rank >= 2 (images) are rescaled to [0, 1] floats; rank-1 arrays
    (labels) come back as integers unless ``rescale`` says otherwise.
    """
    path = Path(path)
    raw = gzip.decompress(path.read_bytes()) if path.suffix == ".gz" else path.read_bytes()
    arr = parse_idx(raw)
    if rescale is None:
        rescale = arr.ndim >= 2
    return arr.astype(np.float64) / 255.0 if rescale else arr.astype(np.int64)


def write_idx(path, arr) -> Path:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise ValueError("write_idx stores unsigned bytes only")
        arr = arr.astype(np.uint8)
    head = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = head + arr.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(payload, mtime=0) if path.suffix == ".gz" else payload)
    return path


def load_mnist_5k() -> tuple[np.ndarray, np.ndarray]:
    """The 5000-image MNIST subset bundled with mlxtend: uint8 (5000, 28, 28), labels."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the optional extra
        raise RuntimeError("the digit subset needs the optional 'mlxtend' package") from exc
    x, y = mnist_data()
    return x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)


# -- held-out evaluation tables ------------------------------------------------------------


def save_evaluation(directory, x, y, config=None, outlier=None, name: str = "evaluation.csv") -> Path:
    """Rows with known composition (and optional configuration id / outlier flag),
    in the same units as the dataset's x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    header = [f"x{i}" for i in range(x.shape[1])] + [f"y{i}" for i in range(y.shape[1])]
    cols = [x, y]
    if config is not None:
        header.append("config")
        cols.append(np.asarray(config, dtype=np.float64)[:, None])
    if outlier is not None:
        header.append("outlier")
        cols.append(np.asarray(outlier, dtype=np.float64)[:, None])
    return _write_csv(Path(directory) / name, header, np.hstack(cols))


def load_evaluation(directory, name: str = "evaluation.csv") -> dict | None:
    path = Path(directory) / name
    if not path.exists():
        return None
    header = path.read_text().split("\n", 1)[0].split(",")
    arr = _read_csv(path, len(header))
    cols = np.array(header)
    out = {
        "x": arr[:, np.char.startswith(cols, "x")],
        "y": arr[:, np.char.startswith(cols, "y")],
        "config": None,
        "outlier": None,
    }
    if "config" in header:
        out["config"] = arr[:, header.index("config")].astype(int)
    if "outlier" in header:
        out["outlier"] = arr[:, header.index("outlier")].astype(bool)
    return out
