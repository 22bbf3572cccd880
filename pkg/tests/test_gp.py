import numpy as np
import pytest
from scipy.stats import multivariate_normal

from agpmil import gp
from agpmil import tensor as T
from agpmil.tensor import Tensor

from conftest import numeric_grad, rel_err


def make_params(rng, m=3, d=2, lengthscale=None, variance=None, random_posterior=True):
    p = gp.SvgpParams.create(m, d, rng)
    p.Z.data[...] = rng.normal(size=(m, d))
    if lengthscale is not None:
        p.kernel.log_lengthscale.data[...] = np.log(lengthscale)
        p.kernel.log_variance.data[...] = np.log(variance)
    else:
        p.kernel.log_lengthscale.data[...] = rng.normal(scale=0.3)
        p.kernel.log_variance.data[...] = rng.normal(scale=0.3)
    if random_posterior:
        p.mu_u.data[...] = rng.normal(size=m)
        p.L_raw.data[...] = np.tril(rng.normal(scale=0.5, size=(m, m)))
    return p


# --- independent oracles --------------------------------------------------
def rbf_loop(a, b, ls, var):
    out = np.empty((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            d2 = 0.0
            for k in range(a.shape[1]):
                d2 += (a[i, k] - b[j, k]) ** 2
            out[i, j] = var * np.exp(-d2 / (2 * ls * ls))
    return out


def dense_q_f(Z, mu, Su, x, ls, var, jitter):
    kzz = rbf_loop(Z, Z, ls, var) + jitter * np.eye(len(Z))
    kxz = rbf_loop(x, Z, ls, var)
    kxx = rbf_loop(x, x, ls, var)
    inv = np.linalg.inv(kzz)
    mean = kxz @ inv @ mu
    cov = kxx - kxz @ inv @ (kzz - Su) @ inv @ kxz.T
    return mean, cov


def su_of(p):
    L = gp.scale_factor(p).data
    return L @ L.T


# --- kernel_matrix --------------------------------------------------------
def test_kernel_diagonal_is_variance(rng):
    k = gp.RbfKernel.create()
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(np.diag(gp.kernel_matrix(x, x, k).data), 1.0, rtol=0, atol=1e-15)


def test_kernel_vanishes_far_away():
    k = gp.RbfKernel.create()
    assert gp.kernel_matrix(np.zeros((1, 2)), np.full((1, 2), 1e3), k).item() == 0.0


def test_kernel_matches_loop(rng):
    k = gp.RbfKernel.create(lengthscale=0.7, variance=1.9)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(gp.kernel_matrix(a, b, k).data, rbf_loop(a, b, 0.7, 1.9), rtol=0, atol=1e-12)


def test_kernel_dim_mismatch():
    with pytest.raises(T.ShapeError):
        gp.kernel_matrix(np.zeros((2, 3)), np.zeros((2, 2)), gp.RbfKernel.create())


# --- q_f ------------------------------------------------------------------
def test_q_f_prior_recovered(rng):
    p = make_params(rng, m=4, d=2)
    p.mu_u.data[...] = 0.0
    lz = gp.prior_factor(p)
    p.set_scale_factor(lz.data)
    x = rng.normal(size=(5, 2))
    q = gp.q_f(p, x)
    np.testing.assert_allclose(q.mean.data, 0.0, atol=1e-15)
    np.testing.assert_allclose(q.cov.data, gp.kernel_matrix(x, x, p.kernel).data, atol=1e-10)


def test_q_f_interpolates_at_inducing_points(rng):
    p = make_params(rng, m=3, d=2, lengthscale=1.0, variance=1.0)
    p.set_scale_factor(1e-7 * np.eye(3))
    q = gp.q_f(p, p.Z.data.copy())
    np.testing.assert_allclose(q.mean.data, p.mu_u.data, atol=1e-5)
    np.testing.assert_allclose(q.cov.data, 0.0, atol=1e-5)


def test_q_f_matches_dense_inverse(rng):
    p = make_params(rng, m=3, d=2)
    x = rng.normal(size=(4, 2))
    q = gp.q_f(p, x)
    mean, cov = dense_q_f(p.Z.data, p.mu_u.data, su_of(p), x, p.kernel.lengthscale, p.kernel.variance, p.jitter)
    np.testing.assert_allclose(q.mean.data, mean, rtol=0, atol=1e-8)
    np.testing.assert_allclose(q.cov.data, cov, rtol=0, atol=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_q_f_properties_random(seed):
    r = np.random.default_rng(seed)
    m, n, d = r.integers(1, 9), r.integers(1, 9), r.integers(1, 4)
    p = make_params(r, m=m, d=d)
    q = gp.q_f(p, r.normal(size=(n, d)))
    c = q.cov.data
    assert np.abs(c - c.T).max() <= 1e-10
    assert np.diag(c).min() >= -1e-8


def test_q_f_rejects_bad_input(rng):
    p = make_params(rng)
    with pytest.raises(T.ShapeError):
        gp.q_f(p, np.zeros((0, 2)))
    with pytest.raises(T.ShapeError):
        gp.q_f(p, np.zeros((3, 5)))


def test_q_f_jitter_escalation_and_failure(rng):
    p = make_params(rng, m=3, d=2)
    p.Z.data[...] = 0.5  # identical inducing points: Kzz has rank one
    q = gp.q_f(p, rng.normal(size=(2, 2)))  # jitter rescues it
    assert np.isfinite(q.mean.data).all()
    k = Tensor(-np.eye(2))
    with pytest.raises(gp.GPStateError):
        gp.jittered_cholesky(k, 1e-6)


# --- kl_u -----------------------------------------------------------------
def test_kl_zero_at_prior(rng):
    p = make_params(rng, m=4, d=3)
    p.mu_u.data[...] = 0.0
    p.set_scale_factor(gp.prior_factor(p).data)
    assert abs(gp.kl_u(p).item()) < 1e-8


def test_kl_scalar_case():
    r = np.random.default_rng(0)
    p = gp.SvgpParams.create(1, 1, r, jitter=0.0)
    p.mu_u.data[...] = 1.0
    p.set_scale_factor(np.eye(1))
    assert gp.kl_u(p).item() == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_monte_carlo(rng):
    p = make_params(rng, m=4, d=2)
    kl = gp.kl_u(p).item()
    su = su_of(p)
    kzz = rbf_loop(p.Z.data, p.Z.data, p.kernel.lengthscale, p.kernel.variance) + p.jitter * np.eye(4)
    u = rng.multivariate_normal(p.mu_u.data, su, size=10**6)
    terms = multivariate_normal(p.mu_u.data, su).logpdf(u) - multivariate_normal(np.zeros(4), kzz).logpdf(u)
    se = terms.std(ddof=1) / np.sqrt(len(terms))
    assert abs(terms.mean() - kl) < 3 * se


@pytest.mark.parametrize("seed", range(20))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(100 + seed)
    p = make_params(r, m=int(r.integers(1, 8)), d=2)
    assert gp.kl_u(p).item() >= -1e-8


# --- gradients --------------------------------------------------------------
def grads_vs_fd(p, build, eps=1e-5):
    params = p.parameters()
    for q in params:
        q.zero_grad()
    build().backward()
    errs = {}
    for q in params:
        num = numeric_grad(lambda: build().item(), q.data, eps)
        errs[q.name] = rel_err(q.grad, num)
    return errs


def test_kl_gradients(rng):
    p = make_params(rng, m=3, d=2)
    errs = grads_vs_fd(p, lambda: gp.kl_u(p))
    assert errs.pop("svgp.Z") < 1e-4
    assert max(errs.values()) < 1e-4


def test_q_f_and_sample_mean_gradients(rng):
    p = make_params(rng, m=3, d=2)
    x = T.Parameter(rng.normal(size=(4, 2)), name="x")
    c1, c2 = rng.normal(size=4), rng.normal(size=(4, 4))
    eps_seed = 7

    def build():
        q = gp.q_f(p, x)
        s = gp.sample_f(q, 3, np.random.default_rng(eps_seed))
        return T.add(T.add(T.sum(T.mul(q.mean, Tensor(c1))), T.sum(T.mul(q.cov, Tensor(c2)))), T.mean(s))

    p.parameters()
    errs = grads_vs_fd(p, build)
    assert max(errs.values()) < 1e-4, errs
    x.zero_grad()
    build().backward()
    assert rel_err(x.grad, numeric_grad(lambda: build().item(), x.data)) < 1e-4


# --- sample_f ---------------------------------------------------------------
def test_sample_degenerate_cov_gives_mean():
    q = gp.GaussianBatch(mean=Tensor([1.0, -2.0, 3.0]), cov=Tensor(np.zeros((3, 3))))
    s = gp.sample_f(q, 5000, np.random.default_rng(0))
    assert s.shape == (5000, 3)
    dev = s.data - np.array([1.0, -2.0, 3.0])
    # residual spread is the sqrt(1e-6) jitter floor
    assert np.abs(dev.mean(axis=0)).max() < 1e-3
    assert np.sqrt((dev**2).mean(axis=0)).max() < 1.05e-3
    assert q.samples is s


def test_sample_moments():
    q = gp.GaussianBatch(mean=Tensor(np.zeros(3)), cov=Tensor(np.eye(3)))
    s = gp.sample_f(q, 10**5, np.random.default_rng(3)).data
    assert np.abs(s.mean(axis=0)).max() < 0.02
    v = s.var(axis=0)
    assert v.min() >= 0.98 and v.max() <= 1.02


def test_sample_deterministic_given_seed(rng):
    q = gp.GaussianBatch(mean=Tensor(rng.normal(size=4)), cov=Tensor(np.eye(4) * 0.3))
    a = gp.sample_f(q, 20, np.random.default_rng(11)).data
    b = gp.sample_f(q, 20, np.random.default_rng(11)).data
    assert a.tobytes() == b.tobytes()


def test_sample_gradient_excludes_noise(rng):
    mean = T.Parameter(rng.normal(size=3))
    q = gp.GaussianBatch(mean=mean, cov=Tensor(np.eye(3)))
    T.sum(gp.sample_f(q, 4, np.random.default_rng(0))).backward()
    np.testing.assert_allclose(mean.grad, 4.0)
