import numpy as np
import pytest

from nullmargin import KernelSpec, fit_nkmmc, gram, project_kernel, resolve_bandwidth
from nullmargin.errors import DataValidationError, ZeroDistanceError
from nullmargin.kmmc import KernelDiscriminantModel, _margin_operator, _solve_generalized

RBF = KernelSpec("rbf", 1.0)


def two_blob_points(rng, per_class=3, dim=2, gap=6.0):
    a = rng.standard_normal((per_class, dim)) * 0.3
    b = rng.standard_normal((per_class, dim)) * 0.3 + gap
    points = np.vstack([a, b])
    labels = np.array([0] * per_class + [1] * per_class)
    return points, labels


def test_bandwidth_two_points():
    assert resolve_bandwidth(np.array([[0.0, 0.0], [2.0, 0.0]])) == 2.0


def test_bandwidth_collinear():
    got = resolve_bandwidth(np.array([[0.0], [1.0], [2.0]]))
    assert np.isclose(got, 4.0 / 3.0)


def test_bandwidth_matches_double_loop():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((50, 4))
    dists = []
    for i in range(50):
        for j in range(i + 1, 50):
            dists.append(np.linalg.norm(pts[i] - pts[j]))
    assert resolve_bandwidth(pts) == np.mean(dists)


def test_bandwidth_identical_points():
    with pytest.raises(ZeroDistanceError):
        resolve_bandwidth(np.ones((4, 3)))


def test_gram_rbf_diagonal_ones():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((6, 3))
    k = gram(pts, pts, RBF)
    np.testing.assert_allclose(np.diag(k), 1.0)


def test_gram_rbf_wide_bandwidth_limit():
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((5, 3))   # distances ~ 1
    k = gram(pts, pts, KernelSpec("rbf", 1e8))
    assert k.min() >= 1 - 1e-15


def test_gram_rbf_psd():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((10, 4))
    k = gram(pts, pts, RBF)
    evals = np.linalg.eigvalsh((k + k.T) / 2)
    assert evals.min() >= -1e-10 * evals.max()


def test_gram_linear_is_dot():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((7, 5))
    np.testing.assert_allclose(gram(a, b, KernelSpec("linear")), a @ b.T)


def test_gram_dimension_mismatch():
    with pytest.raises(DataValidationError):
        gram(np.ones((2, 3)), np.ones((2, 4)), RBF)


def test_fit_separates_two_classes_linear():
    rng = np.random.default_rng(5)
    points, labels = two_blob_points(rng)
    model = fit_nkmmc(points, labels, KernelSpec("linear"))
    assert model.output_dim >= 1
    first = project_kernel(model, points)[:, 0]
    assert first[labels == 0].max() < first[labels == 1].min() or \
        first[labels == 1].max() < first[labels == 0].min()


def test_fit_single_class_rejected():
    with pytest.raises(DataValidationError):
        fit_nkmmc(np.ones((3, 2)), [1, 1, 1], RBF)


def test_fit_no_positive_eigenvalues():
    from nullmargin.errors import EmptyModelError

    # Both classes share the same mean, so the between-means term vanishes
    # and the margin operator is negative semidefinite.
    points = np.array([[-1.0], [1.0], [-2.0], [2.0]])
    labels = [0, 0, 1, 1]
    with pytest.raises(EmptyModelError):
        fit_nkmmc(points, labels, KernelSpec("linear"))


def test_unit_kernel_norm_constraint():
    rng = np.random.default_rng(6)
    points, labels = two_blob_points(rng, per_class=5, dim=3)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    k = gram(points, points, model.resolved_kernel())
    for j in range(model.output_dim):
        a = model.coeffs[:, j]
        assert abs(a @ k @ a - 1.0) < 1e-6


def test_rayleigh_optimality_monte_carlo():
    rng = np.random.default_rng(7)
    points, labels = two_blob_points(rng, per_class=4, dim=3)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    k = gram(points, points, model.resolved_kernel())
    s = _margin_operator(k, labels)
    top = model.coeffs[:, 0]
    best_fit = top @ s @ top
    r = rng.standard_normal((len(points), 1000))
    norms = np.sqrt(np.einsum("jk,jl,lk->k", r, k, r))
    r = r / norms
    random_best = np.einsum("jk,jl,lk->k", r, s, r).max()
    assert best_fit >= random_best - 1e-8 * abs(best_fit)


def test_generalized_eigen_residual():
    rng = np.random.default_rng(8)
    points, labels = two_blob_points(rng, per_class=6, dim=4)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    k = gram(points, points, model.resolved_kernel())
    k = (k + k.T) / 2
    s = _margin_operator(k, labels)
    m = len(points)
    k_j = k + 1e-8 * (np.trace(k) / m) * np.eye(m)
    s_norm = np.linalg.norm(s, 2)
    for j in range(model.output_dim):
        a = model.coeffs[:, j]
        resid = np.linalg.norm(s @ a - model.eigenvalues[j] * (k_j @ a))
        assert resid <= 1e-6 * s_norm * np.linalg.norm(a)


def test_k_orthogonality_of_discriminants():
    rng = np.random.default_rng(9)
    points, labels = two_blob_points(rng, per_class=6, dim=4)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    k = gram(points, points, model.resolved_kernel())
    cross = model.coeffs.T @ k @ model.coeffs
    off = cross - np.diag(np.diag(cross))
    assert np.abs(off).max() <= 1e-6


def test_projection_single_point_model():
    t = np.array([[1.0, -2.0]])
    model = KernelDiscriminantModel(
        train_points=t,
        kernel=KernelSpec("rbf", 0.5),
        resolved_bandwidth=0.5,
        coeffs=np.array([[3.5]]),
        eigenvalues=np.array([1.0]),
        class_index=np.array([0]),
    )
    np.testing.assert_allclose(project_kernel(model, t[0]), [3.5])


def test_projection_batch_equals_gram_product():
    rng = np.random.default_rng(10)
    points, labels = two_blob_points(rng, per_class=4, dim=3)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    batch = project_kernel(model, points)
    k = gram(points, points, model.resolved_kernel())
    np.testing.assert_allclose(batch, k @ model.coeffs, atol=1e-12)
    loop = np.array([
        [
            sum(model.coeffs[j, c] * k[i, j] for j in range(len(points)))
            for c in range(model.output_dim)
        ]
        for i in range(len(points))
    ])
    np.testing.assert_allclose(batch, loop, atol=1e-10)


def test_projection_far_point_decays():
    rng = np.random.default_rng(11)
    points, labels = two_blob_points(rng, per_class=3, dim=2)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    far = np.full(2, 1e6)
    out = project_kernel(model, far)
    assert np.linalg.norm(out) <= 1e-6 * np.linalg.norm(model.coeffs)


def test_projection_row_permutation_invariance():
    rng = np.random.default_rng(12)
    points, labels = two_blob_points(rng, per_class=4, dim=3)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    perm = rng.permutation(len(points))
    permuted = KernelDiscriminantModel(
        train_points=model.train_points[perm],
        kernel=model.kernel,
        resolved_bandwidth=model.resolved_bandwidth,
        coeffs=model.coeffs[perm],
        eigenvalues=model.eigenvalues,
        class_index=model.class_index[perm],
    )
    x = rng.standard_normal((5, 3))
    np.testing.assert_allclose(project_kernel(model, x), project_kernel(permuted, x), atol=1e-12)


def test_eigenvector_set_invariant_under_operator_scaling():
    rng = np.random.default_rng(13)
    points, labels = two_blob_points(rng, per_class=5, dim=3)
    k = gram(points, points, KernelSpec("rbf", 2.0))
    k = (k + k.T) / 2
    s = _margin_operator(k, labels)
    m = len(points)
    k_j = k + 1e-8 * (np.trace(k) / m) * np.eye(m)
    evals_a, vecs_a = _solve_generalized(s, k_j)
    evals_b, vecs_b = _solve_generalized(3.7 * s, k_j)
    np.testing.assert_allclose(evals_b, 3.7 * evals_a, rtol=1e-9, atol=1e-12)
    # same eigenvector set up to sign
    for j in range(m):
        a, b = vecs_a[:, j], vecs_b[:, j]
        sign = 1.0 if a @ b >= 0 else -1.0
        np.testing.assert_allclose(b, sign * a, atol=1e-7 * max(1.0, np.abs(a).max()))


def test_margin_witness_on_separable_fixture():
    rng = np.random.default_rng(14)
    points, labels = two_blob_points(rng, per_class=8, dim=4)
    model = fit_nkmmc(points, labels, KernelSpec("rbf", "auto"))
    proj = project_kernel(model, points)
    intra, inter = [], []
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d = np.linalg.norm(proj[i] - proj[j])
            (intra if labels[i] == labels[j] else inter).append(d)
    assert np.mean(inter) >= np.mean(intra)
