"""Command-line entry point tying data generation, training, evaluation and baselines together.

Every subcommand reads one JSON config with sections ``model``, ``train``,
``data`` and ``eval``.  Flags of the form ``--section.field value`` override
single fields; the seed resolves as ``--seed`` > ``$UVAE_SEED`` > config.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import data as D
from .baseline import pls_fit, pls_predict_composition
from .diffcore import ContractViolation
from .evaluate import (
    MetricReport,
    aligned_composition_kl,
    composition_kl,
    digit_grid,
    endmember_error,
    grouped_leave_p_out,
    nuisance_analysis,
    outlier_rates,
    predict_composition,
    resolve_z,
    write_nuisance_csv,
    write_pgm,
)
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .objectives import ObjectiveCoefficients
from .trainer import TrainConfig, TrainingDiverged, run_training, write_metrics_csv

log = logging.getLogger("uvae")

SECTIONS = ("model", "train", "data", "eval")
PRESETS = ("crism", "libs", "mnist")
SEED_ENV = "UVAE_SEED"


class ConfigError(ValueError):
    """Invalid or unreadable configuration (exit status 2)."""


class UsageError(ValueError):
    """Malformed command line (exit status 2)."""


# -- config sections ---------------------------------------------------------------------


@dataclass
class DataConfig:
    kind: str = "simplex"
    seed: int = 0
    mixture: dict = field(default_factory=dict)
    corner_radius: float = 0.15
    counts: list = field(default_factory=lambda: [500, 992, 501])
    unfeatured_radius: float = 0.15
    standardize: bool = True
    images: str | None = None
    labels: str | None = None
    labeled_digits: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    labeled_count: int = 1000
    unfeatured_count: int = 1000
    validation_count: int = 1000
    n_groups: int = 6
    shots: int = 20
    n_pool: int = 500
    n_unfeatured: int = 500
    train_groups: list = field(default_factory=lambda: [0, 1, 2])
    eval_groups: list = field(default_factory=lambda: [3, 4, 5])

    def __post_init__(self):
        if self.kind not in ("simplex", "digits", "grouped"):
            raise ConfigError("data.kind must be simplex, digits or grouped")
        try:
            D.MixtureSpec.from_dict(self.mixture)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.mixture: {exc}") from None

    @property
    def spec(self) -> D.MixtureSpec:
        return D.MixtureSpec.from_dict(self.mixture)


@dataclass
class EvalConfig:
    z_policy: str = "dataset-mean"
    pls_components: int = 6
    grid_columns: int = 8
    grid_mode: str = "mean"
    outlier_threshold: float = 5.0
    nuisance_component: int = 0

    def __post_init__(self):
        if self.z_policy not in ("prior-mean", "dataset-mean"):
            raise ConfigError("eval.z_policy must be prior-mean or dataset-mean")
        if self.grid_mode not in ("mean", "sample"):
            raise ConfigError("eval.grid_mode must be mean or sample")
        if self.pls_components < 1 or self.grid_columns < 1:
            raise ConfigError("eval.pls_components and eval.grid_columns must be positive")


FIELD_HELP = {
    "model": "network shapes and distribution families (x_dim and y_dim come from the data)",
    "train": "optimizer, schedule, objective coefficients and seed",
    "data": "synthetic generation and split protocol",
    "eval": "evaluation policies",
}
SECTION_TYPES = {"train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _section_fields(section: str):
    if section == "model":
        return [f for f in fields(ModelConfig) if f.name not in ("x_dim", "y_dim")]
    return list(fields(SECTION_TYPES[section]))


def _default(f):
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None if f.default is MISSING else f.default


def config_reference() -> str:
    """Every config field with its default, for --help."""
    lines = ["config fields (JSON sections; override with --section.field VALUE):"]
    for section in SECTIONS:
        lines.append(f"  [{section}] {FIELD_HELP[section]}")
        for f in _section_fields(section):
            lines.append(f"    {section}.{f.name} = {json.dumps(_default(f))}")
    lines.append(f"seed precedence: --seed > ${SEED_ENV} > train.seed / data.seed")
    return "\n".join(lines)


@dataclass
class RunConfig:
    model: dict
    train: TrainConfig
    data: DataConfig
    eval: EvalConfig
    source: str | None = None

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "eval": asdict(self.eval),
        }

    def model_config(self, x_dim: int, y_dim: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "x_dim": x_dim, "y_dim": y_dim})


def read_config(path: str | None, preset: str | None) -> tuple[dict, str | None]:
    if path and preset:
        raise UsageError("give either --config or --preset, not both")
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        text = resources.files("uvae.presets").joinpath(f"{preset}.json").read_text()
        source = f"preset:{preset}"
    elif path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        source = str(path)
    else:
        return {}, None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw, source


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> list[tuple[str, object]]:
    """``--section.field VALUE`` / ``--section.field=VALUE`` pairs."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override {tok} needs a value")
            key, val = tok[2:], tokens[i + 1]
            i += 2
        out.append((key, _parse_value(val)))
    return out


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for key, val in overrides:
        parts = key.split(".")
        if parts[0] not in SECTIONS:
            raise ConfigError(f"unknown config section in override {key!r}")
        node = raw.setdefault(parts[0], {})
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = val
    return raw


def build_config(raw: dict, source: str | None = None) -> RunConfig:
    for section in raw:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
    parts = {}
    for section in SECTIONS:
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        known = {f.name for f in _section_fields(section)}
        for key in body:
            if key not in known:
                raise ConfigError(f"unknown config field {section}.{key}")
        parts[section] = body
    try:
        ModelConfig.from_dict({**parts["model"], "x_dim": 1, "y_dim": 2})
        train = TrainConfig.from_dict(parts["train"])
        data = DataConfig(**parts["data"])
        ev = EvalConfig(**parts["eval"])
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    return RunConfig(dict(parts["model"]), train, data, ev, source)


def resolve_seed(flag: int | None, env: dict | None, config_seed: int) -> int:
    """--seed flag, then $UVAE_SEED, then the config value."""
    if flag is not None:
        return int(flag)
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            return int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"${SEED_ENV} must be an integer") from None
    return int(config_seed)


# -- manifests ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, argv, cfg: RunConfig, seed: int, inputs, outputs, started: str) -> Path:
    out = Path(out)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_source": cfg.source,
        "config": cfg.to_dict(),
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {
            str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p): sha256_file(p)
            for p in sorted(set(map(str, outputs)))
        },
        "started": started,
        "finished": _now(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _dataset_files(directory) -> list[Path]:
    d = Path(directory)
    names = ("labeled.csv", "unlabeled.csv", "unfeatured.csv", "meta.json", "evaluation.csv")
    return [d / n for n in names if (d / n).exists()]


# -- subcommands -------------------------------------------------------------------------


def _z_dim_for_split(cfg: RunConfig) -> int | None:
    if cfg.train.variant != "observed_z":
        return None
    return int(cfg.model.get("z_dim", 1))


def _z_support(cfg: RunConfig) -> tuple[float, float]:
    return float(cfg.model.get("z_lo", -1.5)), float(cfg.model.get("z_hi", 1.5))


def _split_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(int(seed)).spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


def cmd_synth(args, cfg: RunConfig, seed: int) -> list[Path]:
    dc = cfg.data
    if dc.kind != "simplex":
        raise ConfigError("synth generates data.kind = simplex (use mnist-prep for digits, lpo for grouped)")
    spec = dc.spec
    table_seed, split_seed = _split_seeds(seed)
    table = D.generate_synthetic_mixtures(spec, table_seed)
    ds = D.make_simplex_split(
        table, dc.corner_radius, dc.counts, split_seed, dc.unfeatured_radius, _z_dim_for_split(cfg), _z_support(cfg)
    )
    if dc.standardize:
        ds = D.standardize(ds)
    ds.meta.update(
        kind="simplex",
        seed=seed,
        mixture={**spec.to_dict(), "signatures": table.signatures.tolist()},
        levels=table.levels.tolist(),
    )
    ds.validate(*_z_support(cfg))
    out = Path(args.out)
    written = ds.save(out)
    x_eval = ds.standardization.transform(table.x) if ds.standardization else table.x
    written.append(D.save_evaluation(out, x_eval, table.abundance, table.config, table.outlier))
    return written


def cmd_mnist_prep(args, cfg: RunConfig, seed: int) -> list[Path]:
    dc = cfg.data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    images_path = args.images or dc.images
    labels_path = args.labels or dc.labels
    if not images_path or not labels_path:
        imgs, labs = D.load_mnist_5k()
        raw = out / "raw"
        raw.mkdir(exist_ok=True)
        images_path = D.write_idx(raw / "images-idx3-ubyte", imgs)
        labels_path = D.write_idx(raw / "labels-idx1-ubyte", labs)
        written += [images_path, labels_path]
    images = D.load_idx(images_path)
    labels = D.load_idx(labels_path)
    if len(images) != len(labels):
        raise ConfigError("image and label files disagree on the item count")
    x = images.reshape(len(images), -1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    n_val = int(dc.validation_count)
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    ds = D.make_partial_label_split(
        x[train],
        labels[train],
        dc.labeled_digits,
        (dc.labeled_count, dc.unfeatured_count),
        seed,
        _z_dim_for_split(cfg),
        _z_support(cfg),
    )
    ds.meta.update(kind="digits", seed=seed, image_shape=list(images.shape[1:]), train_items=train.tolist())
    ds.validate(*_z_support(cfg))
    written += ds.save(out)
    written.append(D.save_evaluation(out, x[val], np.eye(10)[labels[val]]))
    return written


def _coefficients(cfg: RunConfig, ablation: str | None) -> dict:
    coeffs = cfg.train.coeffs
    if ablation == "m2":
        coeffs = coeffs.m2()
    elif ablation == "m2-strict":
        coeffs = coeffs.m2(strict=True)
    return coeffs.to_dict()


def cmd_train(args, cfg: RunConfig, seed: int) -> list[Path]:
    ds = D.Dataset.load(args.data)
    model = Model(cfg.model_config(ds.x_dim, ds.y_dim))
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed, "coefficients": _coefficients(cfg, args.ablation)})
    cfg.train = tcfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(model, tcfg, ds, out_dir=out)
    bin_path, cfg_path = save_checkpoint(out, model.config, result.params, "checkpoint")
    csv_path = write_metrics_csv(result.log, out / "metrics.csv")
    return [bin_path, cfg_path, csv_path, *result.checkpoints, *[p.with_suffix(".model.json") for p in result.checkpoints]]


def _load_run(run_dir) -> tuple[Model, object]:
    config, params = load_checkpoint(run_dir, "checkpoint")
    return Model(config), params


def cmd_eval(args, cfg: RunConfig, seed: int) -> list[Path]:
    model, params = _load_run(args.run)
    ds = D.Dataset.load(args.data)
    ev = D.load_evaluation(args.data)
    out = Path(args.out or Path(args.run) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    metrics: dict = {}
    per_item: list = []
    if len(ds.labeled_x):
        metrics["train_kl"] = composition_kl(predict_composition(model, params, ds.labeled_x), ds.labeled_y)
    if ev is not None:
        pred = predict_composition(model, params, ev["x"])
        keep = ~ev["outlier"] if ev["outlier"] is not None else np.ones(len(pred), dtype=bool)
        metrics["eval_kl"] = composition_kl(pred[keep], ev["y"][keep])
        digits = ds.meta.get("labeled_digits")
        if digits is not None:
            free = [k for k in range(model.config.y_dim) if k not in digits]
            kl, perm = aligned_composition_kl(pred, ev["y"], free)
            metrics["eval_kl_aligned"] = kl
            metrics["eval_accuracy"] = float(np.mean(pred.argmax(1) == ev["y"].argmax(1)))
            per_item.append({"alignment": perm})
        if ev["config"] is not None and len(np.unique(ev["config"])) > 1:
            na = nuisance_analysis(
                model, params, ev["x"], ev["config"], ds.meta.get("levels"),
                threshold=cfg.eval.outlier_threshold, component=cfg.eval.nuisance_component,
            )
            metrics["nuisance_separation"] = na["separation"]
            if "spearman" in na:
                metrics["nuisance_spearman"] = na["spearman"]
            for c, m in na["medians"].items():
                metrics[f"nuisance_median_{c}"] = m
                metrics[f"nuisance_mad_{c}"] = na["mads"][c]
            if ev["outlier"] is not None and ev["outlier"].any():
                rec, fpr = outlier_rates(na["outliers"], ev["outlier"])
                metrics["outlier_recall"], metrics["outlier_fpr"] = rec, fpr
            written.append(write_nuisance_csv(out / "nuisance.csv", na, ev["config"]))
    shape = ds.meta.get("image_shape")
    if shape is not None:
        z = resolve_z(model, params, cfg.eval.z_policy, ds.labeled_x, ds.labeled_y)
        grid = digit_grid(model, params, z, cfg.eval.grid_mode, seed, cfg.eval.grid_columns, tuple(shape))
        written.append(write_pgm(out / f"grid_{cfg.eval.grid_mode}.pgm", grid))
    report = MetricReport(metrics, per_item, cfg.to_dict(), seed)
    written.append(report.write(out / "eval.json"))
    args.out = str(out)
    return written


def cmd_unmix(args, cfg: RunConfig, seed: int) -> list[Path]:
    model, params = _load_run(args.run)
    ds = D.Dataset.load(args.data)
    sig = (ds.meta.get("mixture") or {}).get("signatures")
    if sig is None:
        raise ConfigError("dataset meta.json carries no endmember signatures")
    z = resolve_z(model, params, cfg.eval.z_policy, ds.labeled_x, ds.labeled_y)
    err = endmember_error(model, params, sig, z, ds.standardization)
    out = Path(args.out or Path(args.run) / "unmix")
    out.mkdir(parents=True, exist_ok=True)
    report = MetricReport(
        {"endmember_error": err["mean"], **{f"endmember_error_{k}": v for k, v in enumerate(err["per_endmember"])}},
        [{"endmember": k, "error": v} for k, v in enumerate(err["per_endmember"])],
        {**cfg.to_dict(), "z": np.asarray(z).tolist()},
        seed,
    )
    args.out = str(out)
    return [report.write(out / "unmix.json")]


def cmd_baseline(args, cfg: RunConfig, seed: int) -> list[Path]:
    ds = D.Dataset.load(args.data)
    ev = D.load_evaluation(args.data)
    k = min(cfg.eval.pls_components, *ds.labeled_x.shape)
    pls = pls_fit(ds.labeled_x, ds.labeled_y, k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {"train_kl": composition_kl(pls_predict_composition(pls, ds.labeled_x), ds.labeled_y), "components": k}
    if ev is not None:
        keep = ~ev["outlier"] if ev["outlier"] is not None else np.ones(len(ev["x"]), dtype=bool)
        metrics["eval_kl"] = composition_kl(pls_predict_composition(pls, ev["x"][keep]), ev["y"][keep])
    model_path = out / "pls.json"
    model_path.write_text(json.dumps(pls.to_dict()) + "\n")
    report = MetricReport(metrics, [], cfg.to_dict(), seed)
    return [model_path, report.write(out / "baseline.json")]


def model_runner(cfg: RunConfig, seed: int, coefficients: dict, pool_x, unfeatured_y, z_support):
    """A grouped leave-p-out runner training on (train rows, pool, unfeatured labels)."""

    def run(train_x, train_y, eval_x):
        z_dim = _z_dim_for_split(cfg)
        rng = np.random.default_rng(seed)
        zu = D.draw_prior_z(len(unfeatured_y), z_dim, *z_support, rng) if z_dim else None
        ds = D.Dataset(np.array(train_x), np.array(train_y), np.array(pool_x), np.array(unfeatured_y), zu)
        if cfg.data.standardize:
            ds = D.standardize(ds)
        model = Model(cfg.model_config(ds.x_dim, ds.y_dim))
        tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed, "coefficients": coefficients})
        params = run_training(model, tcfg, ds).params
        x = ds.standardization.transform(eval_x) if ds.standardization else eval_x
        return predict_composition(model, params, x)

    return run


def pls_runner(k: int):
    def run(train_x, train_y, eval_x):
        return pls_predict_composition(pls_fit(train_x, train_y, min(k, *train_x.shape)), eval_x)

    return run


def cmd_lpo(args, cfg: RunConfig, seed: int) -> list[Path]:
    dc = cfg.data
    table = D.generate_grouped_mixtures(dc.spec, seed, dc.n_groups, dc.shots, dc.n_pool, dc.n_unfeatured)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.train.coeffs
    runners = {
        "full": model_runner(cfg, seed, base.to_dict(), table.pool_x, table.unfeatured_y, _z_support(cfg)),
        "m2": model_runner(cfg, seed, base.m2().to_dict(), table.pool_x, table.unfeatured_y, _z_support(cfg)),
        "pls": pls_runner(cfg.eval.pls_components),
    }
    only = args.runners.split(",") if args.runners else list(runners)
    written, summary = [], {}
    for name in only:
        if name not in runners:
            raise UsageError(f"unknown runner {name!r}")
        rep = grouped_leave_p_out(
            table.x, table.y, table.group, dc.train_groups, dc.eval_groups, runners[name], cfg.to_dict(), seed, name
        )
        summary[name] = rep.metrics["composition_kl"]
        written.append(rep.write(out / f"lpo_{name}.json"))
    written.append(MetricReport(summary, [], cfg.to_dict(), seed).write(out / "lpo_summary.json"))
    return written


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic mixture dataset and its splits"),
    "train": (cmd_train, "train a model; writes checkpoint, metrics.csv and manifest.json"),
    "eval": (cmd_eval, "composition KL, nuisance report and digit grids for a trained run"),
    "unmix": (cmd_unmix, "endmember extraction error of a trained run"),
    "baseline": (cmd_baseline, "fit and score the PLS baseline"),
    "mnist-prep": (cmd_mnist_prep, "read IDX digit files and build the partial-label split"),
    "lpo": (cmd_lpo, "grouped leave-p-out comparison of full, M2 and PLS"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="uvae", description=__doc__, formatter_class=fmt, epilog=config_reference())
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext, formatter_class=fmt, epilog=config_reference())
        group = p.add_mutually_exclusive_group()
        group.add_argument("--config", help="JSON config file")
        group.add_argument("--preset", choices=PRESETS, help="shipped preset config")
        p.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config seed")
        if name in ("train", "eval", "unmix", "baseline"):
            p.add_argument("--data", required=True, help="dataset directory")
        if name in ("eval", "unmix"):
            p.add_argument("--run", required=True, help="training output directory")
            p.add_argument("--out", help=f"output directory (default RUN/{name})")
        else:
            p.add_argument("--out", required=True, help="output directory")
        if name == "train":
            p.add_argument("--ablation", choices=("m2", "m2-strict"), help="m2 zeroes alpha_r; m2-strict also alpha_r_d")
        if name == "mnist-prep":
            p.add_argument("--images", help="IDX image file (default: bundled 5000-digit subset)")
            p.add_argument("--labels", help="IDX label file")
        if name == "lpo":
            p.add_argument("--runners", help="comma-separated subset of full,m2,pls")
    return parser


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        overrides = parse_overrides(rest)
        raw, source = read_config(args.config, args.preset)
        cfg = build_config(apply_overrides(raw, overrides), source)
        section_seed = cfg.data.seed if args.command in ("synth", "mnist-prep", "lpo") else cfg.train.seed
        seed = resolve_seed(args.seed, None, section_seed)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    started = _now()
    try:
        outputs = fn(args, cfg, seed)
        inputs = []
        if getattr(args, "data", None):
            inputs += _dataset_files(args.data)
        if getattr(args, "run", None):
            inputs += [Path(args.run) / "checkpoint.bin", Path(args.run) / "checkpoint.model.json"]
        write_manifest(Path(args.out), args.command, argv, cfg, seed, inputs, outputs, started)
    except (ConfigError, UsageError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(args.out), "seed": seed}))
    return 0


def main() -> None:  # pragma: no cover - console script
    sys.exit(run_cli())
