import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rho_vae import ar1_math, oracle, posterior
from rho_vae.errors import InvalidParameterError, ShapeMismatchError
from rho_vae.posterior import Ar1Posterior, DiagPosterior


def _ar1_from_raw(params):
    return Ar1Posterior(mu=params["mu"], rho=float(np.tanh(params["rho_raw"])), s=float(np.exp(params["log_s"])))


def test_posteriors_validate_their_parameters():
    with pytest.raises(InvalidParameterError):
        DiagPosterior(mu=np.zeros(2), s=np.array([1.0, 0.0]))
    with pytest.raises(ShapeMismatchError):
        DiagPosterior(mu=np.zeros(2), s=np.ones(3))
    with pytest.raises(InvalidParameterError):
        Ar1Posterior(mu=np.zeros(2), rho=1.0, s=1.0)
    with pytest.raises(InvalidParameterError):
        Ar1Posterior(mu=np.zeros(2), rho=0.0, s=-2.0)
    with pytest.raises(ShapeMismatchError):
        Ar1Posterior(mu=np.zeros((3, 2)), rho=np.zeros(2), s=np.ones(3))


def test_kl_diag_examples():
    assert float(posterior.kl_diag(DiagPosterior(mu=np.zeros(8), s=np.ones(8)))) == 0.0
    assert float(posterior.kl_diag(DiagPosterior(mu=np.array([1.0, 0.0]), s=np.ones(2)))) == pytest.approx(0.5)
    value = posterior.kl_diag(DiagPosterior(mu=np.zeros(2), s=np.full(2, math.e)))
    assert float(value) == pytest.approx(math.e - 2.0)


def test_kl_ar1_examples():
    for d in (1, 4, 17):
        assert float(posterior.kl_ar1(Ar1Posterior(mu=np.zeros(d), rho=0.0, s=1.0))) == 0.0
    value = posterior.kl_ar1(Ar1Posterior(mu=np.zeros(2), rho=0.6, s=1.0))
    assert float(value) == pytest.approx(-0.5 * math.log(0.64))
    value = posterior.kl_ar1(Ar1Posterior(mu=np.ones(3), rho=0.0, s=2.0))
    assert float(value) == pytest.approx(0.5 * (3.0 + 3.0 * (2.0 - 1.0 - math.log(2.0))))


def test_kl_ar1_matches_dense_gaussian_kl():
    rng = np.random.default_rng(4)
    for d, rho, s in [(1, 0.3, 0.5), (3, -0.5, 2.0), (8, 0.9, 1.0), (32, -0.99, 100.0), (64, 0.99, 0.01)]:
        mu = rng.standard_normal(d)
        expected = oracle.gaussian_kl(mu, oracle.kms_matrix(d, rho, s))
        assert float(posterior.kl_ar1(Ar1Posterior(mu=mu, rho=rho, s=s))) == pytest.approx(expected, rel=1e-9)


def test_kl_is_nonnegative_over_random_parameters():
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        d = int(rng.integers(1, 10))
        mu = rng.standard_normal(d)
        p = Ar1Posterior(mu=mu, rho=rng.uniform(-0.99, 0.99), s=np.exp(rng.uniform(-3, 3)))
        q = DiagPosterior(mu=mu, s=np.exp(rng.uniform(-3, 3, size=d)))
        assert float(posterior.kl_ar1(p)) > 0.0
        assert float(posterior.kl_diag(q)) > 0.0

    d = 5
    assert float(posterior.kl_ar1(Ar1Posterior(mu=np.zeros(d), rho=0.0, s=1.0))) == pytest.approx(0.0, abs=1e-15)
    assert float(posterior.kl_diag(DiagPosterior(mu=np.zeros(d), s=np.ones(d)))) == pytest.approx(0.0, abs=1e-15)


def test_kl_ar1_reduces_to_isotropic_kl_diag():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        p = Ar1Posterior(mu=rng.standard_normal(d), rho=0.0, s=float(np.exp(rng.uniform(-2, 2))))
        diag = float(posterior.kl_diag(posterior.isotropic(p)))
        assert float(posterior.kl_ar1(p)) == pytest.approx(diag, rel=1e-12, abs=1e-12)


def test_batched_kl_matches_row_by_row():
    rng = np.random.default_rng(7)
    mu = rng.standard_normal((5, 4))
    rho = rng.uniform(-0.9, 0.9, size=5)
    s = np.exp(rng.uniform(-1, 1, size=5))
    batched = posterior.kl_ar1(Ar1Posterior(mu=mu, rho=rho, s=s))
    rows = [float(posterior.kl_ar1(Ar1Posterior(mu=mu[i], rho=rho[i], s=s[i]))) for i in range(5)]
    assert_allclose(batched, rows, rtol=1e-14)


def test_kl_ar1_grad_examples():
    grads = posterior.kl_ar1_grad(Ar1Posterior(mu=np.zeros(3), rho=0.0, s=1.0))
    assert_allclose(grads["mu"], np.zeros(3))
    assert float(grads["log_s"]) == 0.0
    assert float(grads["rho_raw"]) == 0.0
    assert float(posterior.kl_ar1_grad(Ar1Posterior(mu=np.zeros(3), rho=0.5, s=1.0))["rho_raw"]) == pytest.approx(1.0)
    log_s = posterior.kl_ar1_grad(Ar1Posterior(mu=np.zeros(4), rho=0.0, s=math.e))["log_s"]
    assert float(log_s) == pytest.approx(2.0 * (math.e - 1.0))


@pytest.mark.parametrize("d, rho, s", [(1, 0.3, 1.7), (3, 0.5, 1.0), (4, 0.0, math.e), (9, -0.8, 0.4)])
def test_kl_ar1_grad_matches_finite_differences(d, rho, s):
    rng = np.random.default_rng(d)
    params = {"mu": rng.standard_normal(d), "log_s": np.array(math.log(s)), "rho_raw": np.array(math.atanh(rho))}
    analytic = posterior.kl_ar1_grad(_ar1_from_raw(params))
    report = oracle.finite_diff(lambda: float(posterior.kl_ar1(_ar1_from_raw(params))), params, analytic)
    assert report.passed, report.errors


def test_kl_diag_grad_matches_finite_differences():
    rng = np.random.default_rng(8)
    params = {"mu": rng.standard_normal(4), "logvar": rng.uniform(-1, 1, size=4)}

    def build():
        return DiagPosterior(mu=params["mu"], s=np.exp(params["logvar"]))

    report = oracle.finite_diff(lambda: float(posterior.kl_diag(build())), params, posterior.kl_diag_grad(build()))
    assert report.passed, report.errors


def test_sample_diag_examples():
    p = DiagPosterior(mu=np.array([0.5, -1.0]), s=np.array([3.0, 0.2]))
    assert_allclose(posterior.reparametrize_diag(p, np.zeros(2)).z, p.mu)
    z = posterior.reparametrize_diag(DiagPosterior(mu=np.zeros(1), s=np.array([4.0])), np.ones(1)).z
    assert_allclose(z, [2.0])


def test_sample_diag_moments():
    n = 100_000
    p = DiagPosterior(mu=np.tile([1.0, -1.0], (n, 1)), s=np.tile([2.0, 0.5], (n, 1)))
    z = posterior.sample_diag(p, np.random.default_rng(9)).z
    assert_allclose(z.mean(axis=0), [1.0, -1.0], atol=0.02)
    assert_allclose(z.var(axis=0, ddof=1), [2.0, 0.5], rtol=0.03)


def test_sample_ar1_examples():
    p = Ar1Posterior(mu=np.array([1.0, 2.0, 3.0]), rho=0.4, s=2.0)
    assert_allclose(posterior.reparametrize_ar1(p, np.zeros(3)).z, p.mu)
    z = posterior.reparametrize_ar1(Ar1Posterior(mu=np.zeros(3), rho=0.5, s=1.0), [1.0, 0.0, 0.0]).z
    assert_allclose(z, [1.0, 0.5, 0.25])


def test_sample_ar1_covariance():
    n = 100_000
    p = Ar1Posterior(mu=np.zeros((n, 4)), rho=np.full(n, 0.7), s=np.full(n, 2.0))
    z = posterior.sample_ar1(p, np.random.default_rng(10)).z
    expected = ar1_math.materialize(ar1_math.Ar1Cov(4, 0.7, 2.0))
    observed = oracle.sample_covariance(z)
    assert_allclose(np.diag(observed), np.diag(expected), rtol=0.05)
    off_diagonal = ~np.eye(4, dtype=bool)
    assert np.all(np.abs(observed - expected)[off_diagonal] < 0.05)


def test_sample_ar1_is_deterministic_per_seed():
    p = Ar1Posterior(mu=np.zeros(6), rho=-0.3, s=1.5)
    first = posterior.sample_ar1(p, np.random.default_rng(11))
    second = posterior.sample_ar1(p, np.random.default_rng(11))
    assert np.array_equal(first.z, second.z)
    assert np.array_equal(first.eps, second.eps)


def test_sample_ar1_grad_examples():
    p = Ar1Posterior(mu=np.zeros(5), rho=0.6, s=1.2)
    sample = posterior.reparametrize_ar1(p, np.arange(5.0))
    grads = posterior.sample_ar1_grad(p, sample, np.zeros(5))
    assert_allclose(grads["mu"], np.zeros(5))
    assert float(grads["log_s"]) == 0.0
    assert float(grads["rho_raw"]) == 0.0

    one = Ar1Posterior(mu=np.zeros(1), rho=0.8, s=3.0)
    grads = posterior.sample_ar1_grad(one, posterior.reparametrize_ar1(one, [1.3]), [2.0])
    assert float(grads["rho_raw"]) == 0.0


@pytest.mark.parametrize("d, rho, s", [(6, 0.3, 1.5), (2, -0.9, 0.2), (12, 0.95, 4.0)])
def test_sample_ar1_grad_matches_finite_differences(d, rho, s):
    rng = np.random.default_rng(12 + d)
    params = {"mu": rng.standard_normal(d), "log_s": np.array(math.log(s)), "rho_raw": np.array(math.atanh(rho))}
    eps = rng.standard_normal(d)
    upstream = rng.standard_normal(d)
    q = _ar1_from_raw(params)
    analytic = posterior.sample_ar1_grad(q, posterior.reparametrize_ar1(q, eps), upstream)

    def loss():
        return float(upstream @ posterior.reparametrize_ar1(_ar1_from_raw(params), eps).z)

    report = oracle.finite_diff(loss, params, analytic)
    assert report.passed, report.errors


def test_sample_diag_grad_matches_finite_differences():
    rng = np.random.default_rng(13)
    params = {"mu": rng.standard_normal(3), "logvar": rng.uniform(-1, 1, size=3)}
    eps = rng.standard_normal(3)
    upstream = rng.standard_normal(3)

    def build():
        return DiagPosterior(mu=params["mu"], s=np.exp(params["logvar"]))

    analytic = posterior.sample_diag_grad(build(), posterior.reparametrize_diag(build(), eps), upstream)
    report = oracle.finite_diff(
        lambda: float(upstream @ posterior.reparametrize_diag(build(), eps).z), params, analytic
    )
    assert report.passed, report.errors


def test_kl_pair_dispatches_on_kind():
    p = Ar1Posterior(mu=np.ones(2), rho=0.2, s=1.1)
    value, grads = posterior.kl_pair("ar1", p)
    assert float(value) == float(posterior.kl_ar1(p))
    assert set(grads) == {"mu", "log_s", "rho_raw"}
    with pytest.raises(InvalidParameterError):
        posterior.kl_pair("full", p)
