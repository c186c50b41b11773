"""Acceptance criteria 1 to 10.

Each test prints one ``[PASS]`` or ``[FAIL]`` line and then asserts.  The
training experiments (5, 6, 7 and 9) carry the ``slow`` marker; deselect them
with ``-m "not slow"``.
"""
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import linear_gaussian as LG
import oracle_support
from uvae import cli
from uvae import data as D
from uvae import distributions as Dist
from uvae import objectives as O
from uvae.baseline import pls_fit, pls_predict
from uvae.diffcore import value_and_grad
from uvae.evaluate import (
    composition_kl,
    endmember_error,
    nuisance_analysis,
    outlier_rates,
    predict_composition,
    resolve_z,
)
from uvae.model import Model, ModelConfig
from uvae.trainer import TrainConfig, run_training


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail

    return report


# -- 1. gradients ------------------------------------------------------------------------

GRAD_RTOL, GRAD_ATOL = 1e-4, 1e-8


def tiny_model(seed):
    families = {}
    if seed == 4:
        families = dict(y_family="Concrete", y_output="identity", x_family="Bernoulli", x_activation="softplus")
    cfg = ModelConfig(
        x_dim=3, y_dim=3, z_dim=1, y_hidden=[4], z_hidden=[4], x_hidden=[4], aux_hidden=[4], use_aux=True, **families
    )
    return Model(cfg)


def tiny_problem(seed):
    model = tiny_model(seed)
    params = model.init_params(seed)
    rng = np.random.default_rng(100 + seed)
    bern = model.config.x_family == "Bernoulli"
    lx = rng.random((3, 3)) if bern else rng.normal(size=(3, 3))
    ux = rng.random((2, 3)) if bern else rng.normal(size=(2, 3))
    batch = O.Batch(lx, rng.dirichlet(np.ones(3), 3), ux, rng.dirichlet(np.ones(3), 3), rng.uniform(-1, 1, (3, 1)))
    spec = {}
    for variant in O.VARIANTS:
        spec.update(O.noise_spec(model, batch, variant))
    spec["aux_z_eps"] = ("normal", (3 * 2, 1))
    spec["aux_x_eps"] = (model.x_noise_kind(), (3 * 2, 3))
    noise = dict(Dist.NoiseStream(200 + seed).draw(spec))
    return model, params, batch, noise


def objective_terms(model, batch, noise):
    """name -> scalar objective of the parameters, every one on fixed noise."""
    b, n = batch, noise
    coeffs = O.ObjectiveCoefficients(1.0, 0.7, 0.3, 0.2)
    return {
        "forward_labeled": lambda p: O.elbo_forward_labeled(model, p, b.labeled_x, b.labeled_y, {"z_eps": n["l_z_eps"]}).total(),
        "forward_unlabeled": lambda p: O.elbo_forward_unlabeled(
            model, p, b.unlabeled_x, {"y_eps": n["u_y_eps"], "z_eps": n["u_z_eps"]}
        ).total(),
        "reverse_labeled": lambda p: O.elbo_reverse_labeled(
            model, p, b.labeled_x, b.labeled_y, {"z_prior": n["l_z_prior"]}
        ).total(),
        "reverse_latent_z": lambda p: O.elbo_reverse_unfeatured(
            model, p, b.unfeatured_y, {"z_prior": n["f_z_prior"], "x_eps": n["f_x_eps"]}, "latent_z"
        ).total(),
        "reverse_observed_z": lambda p: O.elbo_reverse_unfeatured(
            model, p, b.unfeatured_y, {"x_eps": n["f_x_eps"]}, "observed_z", b.unfeatured_z
        ).total(),
        "reverse_aux_z": lambda p: O.elbo_reverse_unfeatured(
            model, p, b.unfeatured_y, {"z_eps": n["f_z_eps"], "x_eps": n["f_x_eps"]}, "aux_z"
        ).total(),
        "aux_consistency": lambda p: O.aux_consistency_kl(
            model, p, b.unfeatured_y, {"z_eps": n["aux_z_eps"], "x_eps": n["aux_x_eps"]}, 2
        ),
        "loss_y": lambda p: O.discriminative_losses(model, p, b.labeled_x, b.labeled_y, {"z_prior": n["l_z_prior"]})[0].sum(),
        "loss_x": lambda p: O.discriminative_losses(model, p, b.labeled_x, b.labeled_y, {"z_prior": n["l_z_prior"]})[1].sum(),
        "total": lambda p: O.total_objective(model, p, b, coeffs, n).J,
    }


def finite_difference(fn, params, h=1e-6):
    grads = {}
    for k in params:
        g = np.zeros_like(params[k])
        for i in np.ndindex(params[k].shape):
            step = h * max(1.0, abs(params[k][i]))
            up, dn = params[k].copy(), params[k].copy()
            up[i] += step
            dn[i] -= step
            g[i] = (fn(params.replace({k: up})).item() - fn(params.replace({k: dn})).item()) / (2 * step)
        grads[k] = g
    return grads


def test_criterion_1_gradients_match_finite_differences(verdict):
    start = time.time()
    worst, failures = 0.0, []
    for seed in range(5):
        model, params, batch, noise = tiny_problem(seed)
        for name, fn in objective_terms(model, batch, noise).items():
            _, grads = value_and_grad(fn, params)
            fd = finite_difference(fn, params)
            for k in params:
                diff = np.abs(grads[k] - fd[k])
                scale = np.maximum(np.abs(grads[k]), np.abs(fd[k]))
                bad = diff > np.maximum(GRAD_RTOL * scale, GRAD_ATOL)
                rel = diff / np.maximum(scale, GRAD_ATOL)
                worst = max(worst, float(rel.max()))
                if bad.any():
                    failures.append((seed, name, k))
    elapsed = time.time() - start
    ok = not failures and elapsed < 120
    verdict(1, ok, f"5 models x 10 objectives, worst relative error {worst:.2e}, {elapsed:.0f}s, failures {failures[:5]}")


# -- 2. bound property -------------------------------------------------------------------


def test_criterion_2_bounds_do_not_exceed_exact_evidence(verdict):
    start = time.time()
    m, p = LG.build()
    n = 100_000
    stream = Dist.NoiseStream(2)
    x, y = np.tile(LG.X_OBS, (n, 1)), np.tile(LG.Y_OBS, (n, 1))
    labeled = O.elbo_forward_labeled(m, p, x, y, {"z_eps": stream.sample("normal", (n, 1))}).value.data
    unlabeled = O.elbo_forward_unlabeled(
        m, p, x, {"y_eps": stream.sample("normal", (n, 3)), "z_eps": stream.sample("normal", (n, 1))}
    ).value.data
    excess_l = (labeled.mean() - LG.log_evidence_with_label()) / (labeled.std() / math.sqrt(n))
    excess_u = (unlabeled.mean() - LG.log_evidence()) / (unlabeled.std() / math.sqrt(n))
    elapsed = time.time() - start
    ok = excess_l <= 3 and excess_u <= 3 and elapsed < 60
    verdict(2, ok, f"labeled excess {excess_l:.1f} SE, unlabeled excess {excess_u:.1f} SE (limit 3), {elapsed:.1f}s")


# -- 3. samplers -------------------------------------------------------------------------


def test_criterion_3_sampler_statistics(verdict):
    n = 100_000
    stream = Dist.NoiseStream(3)
    mu = np.array([0.5, -1.2, 2.0])
    sd = np.array([1.0, 0.5, 2.0])
    draws = Dist.rsample(Dist.diag_gaussian(mu, 2 * np.log(sd)), stream.sample("normal", (n, 3))).data
    z_mean = np.abs(draws.mean(0) - mu) / (sd / math.sqrt(n))
    z_var = np.abs(draws.var(0, ddof=1) - sd**2) / (sd**2 * math.sqrt(2 / (n - 1)))

    logits = np.array([1.0, 0.2, -0.5, 0.0])
    ys = Dist.rsample(Dist.concrete(logits, 0.5), stream.sample("gumbel", (n, 4))).data
    freq = np.bincount(ys.argmax(1), minlength=4) / n
    probs = np.exp(logits) / np.exp(logits).sum()
    z_freq = np.abs(freq - probs) / np.sqrt(probs * (1 - probs) / n)

    worst = max(z_mean.max(), z_var.max(), z_freq.max())
    verdict(3, worst <= 4, f"largest deviation {worst:.2f} SE over means, variances and argmax frequencies (limit 4)")


# -- 4. scripted oracle ------------------------------------------------------------------


def test_criterion_4_scripted_oracle_agreement(verdict):
    dev = oracle_support.max_deviation()
    worst_key = max(dev, key=dev.get)
    proc = subprocess.run(
        [sys.executable, str(oracle_support.ORACLE_DIR / "scripted_oracle.py"), "--check"], capture_output=True, text=True
    )
    ok = dev[worst_key] < oracle_support.TOLERANCE and proc.returncode == 0
    verdict(4, ok, f"{len(dev)} terms, max deviation {dev[worst_key]:.1e} at {worst_key}, oracle rerun exit {proc.returncode}")


# -- 5. endmember extraction -------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_full_model_extracts_endmembers_better_than_m2(verdict):
    start = time.time()
    errors = {"full": [], "m2": []}
    for seed in range(5):
        table = D.generate_synthetic_mixtures(D.MixtureSpec(replicates=24), seed)
        ds = D.standardize(D.make_simplex_split(table, counts=(500, 992, 501), seed=seed))
        for name, coeffs in (("full", O.CRISM_COEFFICIENTS), ("m2", O.CRISM_COEFFICIENTS.m2())):
            model = Model(ModelConfig(x_dim=32, y_dim=3))
            cfg = TrainConfig(epochs=1000, seed=seed, coefficients=coeffs.to_dict(), log_every=50)
            params = run_training(model, cfg, ds).params
            z = resolve_z(model, params, "dataset-mean", ds.labeled_x, ds.labeled_y)
            errors[name].append(endmember_error(model, params, table.signatures, z, ds.standardization)["mean"])
    full, m2 = np.median(errors["full"]), np.median(errors["m2"])
    rel = 1 - full / m2
    elapsed = time.time() - start
    per_seed = [round(1 - f / m, 3) for f, m in zip(errors["full"], errors["m2"])]
    ok = rel >= 0.05 and elapsed < 900
    verdict(5, ok, f"median error full {full:.4f} vs m2 {m2:.4f}, improvement {rel:.1%} (need 5%), per seed {per_seed}, {elapsed:.0f}s")


# -- 6. digits ---------------------------------------------------------------------------

DIGIT_MODEL = dict(
    x_dim=784, y_dim=10, z_dim=2, y_hidden=[64], z_hidden=[64], x_hidden=[64],
    y_activation="softplus", z_activation="softplus", x_activation="softplus",
    y_family="Concrete", y_output="identity", x_family="Bernoulli",
)
DIGIT_COEFFICIENTS = O.ObjectiveCoefficients(1.0, 100.0, 0.01, 1.0)


@pytest.mark.slow
def test_criterion_6_full_model_beats_m2_on_unseen_digits(verdict, tmp_path):
    start = time.time()
    assert cli.run_cli(["mnist-prep", "--preset", "mnist", "--seed", "0", "--out", str(tmp_path)]) == 0
    ds, ev = D.Dataset.load(tmp_path), D.load_evaluation(tmp_path)
    kls = {"full": [], "m2": []}
    for seed in range(3):
        for name, coeffs in (("full", DIGIT_COEFFICIENTS), ("m2", DIGIT_COEFFICIENTS.m2())):
            model = Model(ModelConfig(**DIGIT_MODEL))
            cfg = TrainConfig(epochs=100, batch_size=100, learning_rate=0.001, seed=seed, coefficients=coeffs.to_dict(), log_every=10)
            params = run_training(model, cfg, ds).params
            kls[name].append(composition_kl(predict_composition(model, params, ev["x"]), ev["y"]))
    full, m2 = np.median(kls["full"]), np.median(kls["m2"])
    elapsed = time.time() - start
    ok = full < m2 and elapsed < 1800
    verdict(6, ok, f"median validation KL full {full:.4f} vs m2 {m2:.4f}, per seed {np.round(kls['full'], 4).tolist()} vs "
                   f"{np.round(kls['m2'], 4).tolist()}, {elapsed:.0f}s")


# -- 7. grouped leave-p-out ordering ----------------------------------------------------

M2_MARGIN = 1.05


@pytest.mark.slow
def test_criterion_7_grouped_ordering(verdict, tmp_path):
    scores = {"full": [], "m2": [], "pls": []}
    for seed in range(3):
        out = tmp_path / f"lpo{seed}"
        assert cli.run_cli(["lpo", "--preset", "libs", "--seed", str(seed), "--out", str(out)]) == 0
        summary = json.loads((out / "lpo_summary.json").read_text())["metrics"]
        for name in scores:
            scores[name].append(summary[name])
    med = {k: float(np.median(v)) for k, v in scores.items()}
    ok = med["full"] < med["pls"] and med["full"] <= M2_MARGIN * med["m2"]
    verdict(7, ok, f"median held-out KL full {med['full']:.4f}, m2 {med['m2']:.4f}, pls {med['pls']:.4f}")


# -- 8. PLS exactness --------------------------------------------------------------------


def test_criterion_8_pls_exact_on_noise_free_linear_data(verdict):
    spec = D.MixtureSpec(mixing="linear", noise=0.0, jitter=0.0)
    g = D.generate_grouped_mixtures(spec, 8, gain_range=(1.0, 1.0))
    train, held = np.isin(g.group, [0, 1, 2]), np.isin(g.group, [3, 4, 5])
    # three compositions span the 2-dim simplex plane, so rank = 2
    model = pls_fit(g.x[train], g.y[train], k=2)
    err = max(np.max(np.abs(pls_predict(model, g.x[held]) - g.y[held])), np.max(np.abs(pls_predict(model, g.x[train]) - g.y[train])))
    gram = model.scores.T @ model.scores
    ortho = np.max(np.abs(gram - np.diag(np.diag(gram))))
    verdict(8, err < 1e-8 and ortho < 1e-8, f"max abs error {err:.1e}, score orthogonality {ortho:.1e} (limits 1e-8)")


# -- 9. nuisance structure ---------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_nuisance_levels_and_outliers(verdict):
    seps, recalls, fprs = [], [], []
    for seed in range(3):
        table = D.generate_synthetic_mixtures(D.MixtureSpec(replicates=5, outlier_fraction=0.05), seed)
        ds = D.standardize(D.make_simplex_split(table, counts=(300, 645, 300), seed=seed))
        model = Model(ModelConfig(x_dim=32, y_dim=3))
        cfg = TrainConfig(epochs=800, seed=seed, coefficients=O.CRISM_COEFFICIENTS.to_dict(), log_every=50)
        params = run_training(model, cfg, ds).params
        res = nuisance_analysis(model, params, ds.standardization.transform(table.x), table.config, table.levels)
        recall, fpr = outlier_rates(res["outliers"], table.outlier)
        seps.append(res["separation"])
        recalls.append(recall)
        fprs.append(fpr)
    sep, recall, fpr = np.median(seps), np.median(recalls), np.median(fprs)
    ok = sep > 3 and recall >= 0.9 and fpr <= 0.05
    verdict(9, ok, f"median separation {sep:.2f} MADs (need >3), recall {recall:.2f}, fpr {fpr:.3f}; per seed {np.round(seps, 2).tolist()}")


# -- 10. determinism ---------------------------------------------------------------------


def test_criterion_10_cli_pipeline_is_deterministic(verdict, tmp_path):
    digests = []
    for tag in ("a", "b"):
        data, run = tmp_path / f"data_{tag}", tmp_path / f"run_{tag}"
        common = ["--preset", "crism", "--seed", "7"]
        assert cli.run_cli(["synth", *common, "--out", str(data)]) == 0
        assert cli.run_cli(["train", *common, "--data", str(data), "--out", str(run), "--train.epochs", "3"]) == 0
        assert cli.run_cli(["eval", *common, "--data", str(data), "--run", str(run)]) == 0
        files = [data / "labeled.csv", run / "metrics.csv", run / "checkpoint.bin", run / "eval" / "eval.json"]
        digests.append([cli.sha256_file(f) for f in files])
    ok = digests[0] == digests[1]
    verdict(10, ok, f"two runs, dataset/metrics.csv/checkpoint.bin/eval.json digests {'identical' if ok else 'differ'}")
