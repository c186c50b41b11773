import math

import numpy as np
import pytest

import linear_gaussian as LG
import oracle_support
from uvae import objectives as O
from uvae.diffcore import ContractViolation, ParamSet
from uvae.model import Model, ModelConfig


@pytest.fixture(scope="module")
def frozen():
    return oracle_support.expected()


@pytest.fixture(scope="module")
def package():
    return {name: oracle_support.package_values(spec) for name, spec in oracle_support.pinned().items()}


@pytest.mark.parametrize("model_name", ["gaussian", "concrete"])
def test_matches_scripted_oracle(model_name, frozen, package):
    want, got = frozen[model_name], package[model_name]
    assert set(want) == set(got)
    for term in want:
        tol = 1e-10 if term.startswith("loss") else 1e-9
        assert np.max(np.abs(got[term] - want[term])) < tol, term


def small(use_aux=True, seed=0):
    cfg = ModelConfig(x_dim=3, y_dim=3, z_dim=1, y_hidden=[4], z_hidden=[4], x_hidden=[4], aux_hidden=[4], use_aux=use_aux)
    m = Model(cfg)
    return m, m.init_params(seed)


RNG = np.random.default_rng(11)
LX = RNG.normal(size=(4, 3))
LY = RNG.dirichlet(np.ones(3), size=4)
UX = RNG.normal(size=(3, 3))
FY = np.eye(3)
FZ = np.array([[0.2], [-0.7], [1.1]])


def test_forward_labeled_term_sum():
    m, p = small()
    eps = RNG.normal(size=(4, 1))
    e = O.elbo_forward_labeled(m, p, LX, LY, {"z_eps": eps})
    qz = m.encode_z(p, LX, LY)
    z = qz["mu"].data + np.exp(qz["logvar"].data / 2) * eps
    px = m.decode_x(p, LY, z)
    lpx = -0.5 * np.sum(px["logvar"].data + (LX - px["mu"].data) ** 2 / np.exp(px["logvar"].data) + math.log(2 * math.pi), axis=1)
    lqz = -0.5 * np.sum(qz["logvar"].data + (z - qz["mu"].data) ** 2 / np.exp(qz["logvar"].data) + math.log(2 * math.pi), axis=1)
    want = lpx - lqz + math.log(2) - math.log(3)
    assert np.allclose(e.value.data, want, atol=1e-12)
    assert np.allclose(sum(e.breakdown().values()), e.value.data, atol=1e-12)


def test_unlabeled_and_reverse_term_sums():
    m, p = small()
    e8 = O.elbo_forward_unlabeled(m, p, UX, {"y_eps": RNG.normal(size=(3, 3)), "z_eps": RNG.normal(size=(3, 1))})
    assert np.allclose(sum(e8.breakdown().values()), e8.value.data, atol=1e-12)
    e9 = O.elbo_reverse_labeled(m, p, LX, LY, {"z_prior": RNG.random((4, 1))}, gamma=7.0)
    assert np.allclose(e9.breakdown()["log_qx"], -3 * math.log(14.0), atol=1e-14)
    assert np.allclose(sum(e9.breakdown().values()), e9.value.data, atol=1e-12)


def test_reverse_variants_and_latent_observed_identity():
    m, p = small()
    u = RNG.random((3, 1))
    x_eps = RNG.normal(size=(3, 3))
    latent = O.elbo_reverse_unfeatured(m, p, FY, {"z_prior": u, "x_eps": x_eps}, "latent_z")
    z = O.prior_z_sample(m, u)
    observed = O.elbo_reverse_unfeatured(m, p, FY, {"x_eps": x_eps}, "observed_z", z)
    back = observed.value.data - O.log_prior_z(m, z).data
    assert np.allclose(latent.value.data, back, atol=1e-12)
    aux = O.elbo_reverse_unfeatured(m, p, FY, {"z_eps": RNG.normal(size=(3, 1)), "x_eps": x_eps}, "aux_z")
    for e in (latent, observed, aux):
        assert np.allclose(sum(e.breakdown().values()), e.value.data, atol=1e-12)
    with pytest.raises(ContractViolation):
        O.elbo_reverse_unfeatured(m, p, FY, {"x_eps": x_eps}, "observed_z")
    with pytest.raises(ContractViolation):
        O.elbo_reverse_unfeatured(m, p, FY, {"x_eps": x_eps}, "guess_z")
    m2, p2 = small(use_aux=False)
    with pytest.raises(ContractViolation):
        O.elbo_reverse_unfeatured(m2, p2, FY, {"z_eps": np.zeros((3, 1)), "x_eps": x_eps}, "aux_z")


def test_monte_carlo_samples_average_rows():
    m, p = small()
    eps = RNG.normal(size=(8, 1))
    two = O.elbo_forward_labeled(m, p, LX, LY, {"z_eps": eps}, samples=2).value.data
    one = O.elbo_forward_labeled(m, p, np.repeat(LX, 2, 0), np.repeat(LY, 2, 0), {"z_eps": eps}).value.data
    assert np.allclose(two, one.reshape(4, 2).mean(1), atol=1e-12)


def test_aux_consistency_zero_for_matched_degenerate_nets():
    m, _ = small()
    p = m.zero_params()
    # both z networks output the same constant distribution
    p = p.replace({"phi/aux_z/mean_b": np.array([0.4]), "phi/encoder_z/mean_b": np.array([0.4])})
    kl = O.aux_consistency_kl(m, p, FY, {"z_eps": RNG.normal(size=(12, 1)), "x_eps": RNG.normal(size=(12, 3))}, 4)
    assert abs(kl.item()) < 1e-12


def test_aux_consistency_non_negative_in_expectation():
    m, p = small(seed=4)
    vals = [
        O.aux_consistency_kl(m, p, FY, {"z_eps": RNG.normal(size=(3 * 16, 1)), "x_eps": RNG.normal(size=(3 * 16, 3))}, 16).item()
        for _ in range(20)
    ]
    assert np.mean(vals) > -3 * np.std(vals) / math.sqrt(len(vals))


def test_discriminative_losses_zero_cases():
    m, p = small()
    ybar = m.predict_y(p, LX).data
    loss_y, _ = O.discriminative_losses(m, p, LX, ybar, {"z_prior": np.full((4, 1), 0.5)})
    assert np.allclose(loss_y.data, 0.0, atol=1e-12)
    z = O.prior_z_sample(m, np.full((4, 1), 0.5))
    xbar = m.decode_x(p, LY, z).mean().data
    _, loss_x = O.discriminative_losses(m, p, xbar, LY, {"z_prior": np.full((4, 1), 0.5)})
    assert np.allclose(loss_x.data, 0.0, atol=1e-24)


def _batch_and_noise(m, variant="observed_z"):
    b = O.Batch(LX, LY, UX, FY, FZ)
    spec = O.noise_spec(m, b, variant)
    rng = np.random.default_rng(5)
    noise = {k: (rng.random(s) if kind == "uniform" else rng.normal(size=s)) for k, (kind, s) in spec.items()}
    return b, noise


def test_total_objective_zero_coefficients_and_gating():
    m, p = small()
    b, noise = _batch_and_noise(m)
    zero = O.total_objective(m, p, b, O.ObjectiveCoefficients(0, 0, 0, 0), noise)
    assert zero.J.item() == 0.0
    c = O.ObjectiveCoefficients(1.0, 0.7, 0.3, 0.2)
    full = O.total_objective(m, p, b, c, noise).metrics
    m2 = O.total_objective(m, p, b, c.m2(strict=True), noise).metrics
    forward = full["elbo_fxy"] + full["elbo_fx"] - 0.7 * full["loss_y"] * len(LX)
    assert m2["J"] == pytest.approx(forward, abs=1e-10)
    assert math.isnan(m2["elbo_rxy"]) and math.isnan(m2["elbo_ry"])
    recombined = forward + 0.3 * (full["elbo_rxy"] + full["elbo_ry"]) - 0.2 * full["loss_x"] * len(LX)
    assert full["J"] == pytest.approx(recombined, abs=1e-10)


def test_total_objective_empty_batch_warns():
    m, p = small()
    res = O.total_objective(m, p, O.Batch(), O.ObjectiveCoefficients(), {})
    assert res.J.item() == 0.0 and res.warnings


def test_coefficients_validation():
    with pytest.raises(ContractViolation):
        O.ObjectiveCoefficients(alpha_f=-1.0)
    with pytest.raises(ContractViolation):
        O.ObjectiveCoefficients.from_dict({"alpha_q": 1.0})
    c = O.ObjectiveCoefficients(1, 1, 0.01, 1).m2()
    assert c.alpha_r == 0.0 and c.alpha_r_d == 1.0


def test_labeled_bound_tight_at_exact_posterior():
    m, p = LG.build(q_std_scale=1.0, q_shift=0.0)
    e = O.elbo_forward_labeled(m, p, LG.X_OBS, LG.Y_OBS, {"z_eps": np.array([[0.7]])})
    assert e.value.item() == pytest.approx(LG.log_evidence_with_label(), abs=1e-9)


def test_bounds_hold_on_tractable_model():
    m, p = LG.build()
    n = 20000
    rng = np.random.default_rng(3)
    x, y = np.tile(LG.X_OBS, (n, 1)), np.tile(LG.Y_OBS, (n, 1))
    e7 = O.elbo_forward_labeled(m, p, x, y, {"z_eps": rng.normal(size=(n, 1))}).value.data
    e8 = O.elbo_forward_unlabeled(m, p, x, {"y_eps": rng.normal(size=(n, 3)), "z_eps": rng.normal(size=(n, 1))}).value.data
    assert e7.mean() <= LG.log_evidence_with_label() + 3 * e7.std() / math.sqrt(n)
    assert e8.mean() <= LG.log_evidence() + 3 * e8.std() / math.sqrt(n)
