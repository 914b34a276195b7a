import math

import numpy as np
import pytest

from oseen_hho.hho_local import (
    AdvectiveStabilization,
    ProblemData,
    StabilizationChoice,
    UndefinedReferenceTime,
    ViscousStabilization,
    a_hat_scharfetter_gummel,
    a_hat_theta,
    a_hat_upwind,
    build_elements,
    build_local_operators,
    check_a_hat,
    interpolate_local,
    local_reference_quantities,
)
from oseen_hho.cases import kovasznay_case
from oseen_hho.mesh import Mesh, compute_geometry
from oseen_hho.polyspace import elliptic_project, l2_project

SQUARE = [[0, 0], [1, 0], [1, 1], [0, 1]]
PENTAGON = [[0.1, 0.0], [1.2, 0.2], [1.4, 0.9], [0.6, 1.5], [-0.2, 0.8]]
TRIANGLE = [[0.2, 0.1], [1.0, 0.3], [0.4, 0.9]]
SHAPES = {"square": SQUARE, "pentagon": PENTAGON, "triangle": TRIANGLE}

ROTATION = ProblemData(
    nu=0.3,
    beta=lambda p: np.column_stack([p[:, 1], -p[:, 0]]),
    beta_grad=lambda p: np.broadcast_to(np.array([[0.0, 1.0], [-1.0, 0.0]]), (len(p), 2, 2)),
    mu=0.5,
)
LDGH = StabilizationChoice(ViscousStabilization("ldgh"))


def element_of(vertices, k, surplus=4):
    mesh = Mesh.from_cells(np.asarray(vertices, float), [list(range(len(vertices)))])
    return build_elements(mesh, compute_geometry(mesh), k, surplus)[0]


def ops_of(vertices, k, data=ROTATION, choice=StabilizationChoice()):
    return build_local_operators(element_of(vertices, k), data, choice)


def random_poly(element, degree, rng):
    """Random vector polynomial of given degree in the cell basis, with its evaluator."""
    basis = element.cell.basis(degree)
    coef = rng.standard_normal((basis.dim, 2))
    return coef, (lambda p: basis.eval(p) @ coef)


# --------------------------------------------------------------------------- interpolation


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_interpolation_reproduces_polynomials(k, rng):
    e = element_of(PENTAGON, k)
    coef, w = random_poly(e, k, rng)
    comps = e.to_components(interpolate_local(e, w))
    assert np.allclose(comps[: e.nk], coef, atol=1e-11)
    for i, face in enumerate(e.faces):
        pts = face.quadrature(2 * k).points
        assert np.allclose(face.basis(k).eval(pts) @ comps[e.scalar_face_slice(i)], w(pts), atol=1e-11)


def test_interpolation_of_constant():
    e = element_of(PENTAGON, 2)
    comps = e.to_components(interpolate_local(e, lambda p: np.tile([1.0, 0.0], (len(p), 1))))
    assert np.allclose(comps[0], [1, 0]) and np.allclose(comps[1 : e.nk], 0, atol=1e-13)
    for i in range(len(e.faces)):
        block = comps[e.scalar_face_slice(i)]
        assert np.allclose(block[0], [1, 0]) and np.allclose(block[1:], 0, atol=1e-13)


def test_interpolation_matches_gram_solve_oracle():
    e = element_of(SQUARE, 1)
    v = lambda p: np.column_stack([np.sin(p[:, 1]), np.cos(p[:, 0])])
    comps = e.to_components(interpolate_local(e, v))
    assert np.allclose(comps[: e.nk], l2_project(e.cell, 1, v, exactness=e.qdeg), atol=1e-13)
    for i, face in enumerate(e.faces):
        assert np.allclose(comps[e.scalar_face_slice(i)], l2_project(face, 1, v, exactness=e.qdeg), atol=1e-13)


def test_local_dof_count():
    e = element_of(PENTAGON, 2)
    assert e.n_vector == 2 * 6 + 5 * 2 * 3


# --------------------------------------------------------------------------- reconstruction


@pytest.mark.parametrize("shape", list(SHAPES))
@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_reconstruction_of_interpolant(shape, k, rng):
    op = ops_of(SHAPES[shape], k)
    e = op.element
    for _ in range(20):
        coef, w = random_poly(e, k + 1, rng)
        assert np.allclose(op.reconstruct(interpolate_local(e, w)), coef, atol=1e-10 * max(1, np.abs(coef).max()))


def test_reconstruction_matrix_identity(rng):
    # R_T . (interpolation of P^{k+1}) = identity on P^{k+1} coefficients (the elliptic projector there)
    op = ops_of(PENTAGON, 2)
    assert np.allclose(op.R @ op.I_high, np.eye(op.R.shape[0]), atol=1e-10)


def test_reconstruction_of_constant():
    op = ops_of(TRIANGLE, 2)
    e = op.element
    rec = op.reconstruct(interpolate_local(e, lambda p: np.tile([2.0, -1.0], (len(p), 1))))
    expected = np.zeros_like(rec)
    expected[0] = [2.0, -1.0]
    assert np.allclose(rec, expected, atol=1e-12)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_reconstruction_matches_elliptic_projector_oracle(k):
    op = ops_of(PENTAGON, k)
    e = op.element
    v = lambda p: np.column_stack([p[:, 0] * np.exp(p[:, 1]), -p[:, 1] * np.exp(p[:, 1])])
    rec = op.reconstruct(interpolate_local(e, v))
    qdeg = e.qdeg + 6
    grads = [
        lambda p: np.column_stack([np.exp(p[:, 1]), p[:, 0] * np.exp(p[:, 1])]),
        lambda p: np.column_stack([np.zeros(len(p)), -(1 + p[:, 1]) * np.exp(p[:, 1])]),
    ]
    for c in range(2):
        oracle = elliptic_project(e.cell, k + 1, lambda p: v(p)[:, c], grads[c], exactness=qdeg)
        # agreement up to quadrature of non-polynomial data on the face/cell projections
        assert np.allclose(rec[:, c], oracle, atol=1e-6)


@pytest.mark.parametrize("k", [0, 2])
def test_reconstruction_variational_identity(k, rng):
    op = ops_of(PENTAGON, k)
    e = op.element
    rule = e.cell.quadrature(e.qdeg)
    high = e.cell.basis(k + 1)
    low = e.cell.basis(k)
    v = rng.standard_normal(e.n_scalar)
    r = op.R @ v
    dhigh = high.grad(rule.points)
    lhs = np.einsum("q,qid,qd->i", rule.weights, dhigh, np.einsum("qjd,j->qd", dhigh, r))
    rhs = np.einsum("q,qid,qd->i", rule.weights, dhigh, np.einsum("qjd,j->qd", low.grad(rule.points), v[: e.nk]))
    for i, (face, n) in enumerate(zip(e.faces, e.normals)):
        fr = face.quadrature(e.qdeg)
        jump = face.basis(k).eval(fr.points) @ v[e.scalar_face_slice(i)] - low.eval(fr.points) @ v[: e.nk]
        rhs += (high.grad(fr.points) @ n).T @ (fr.weights * jump)
    assert np.allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max())
    assert rule.weights @ (high.eval(rule.points) @ r) == pytest.approx(rule.weights @ (low.eval(rule.points) @ v[: e.nk]))


# --------------------------------------------------------------------------- difference operators


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_difference_operators_vanish_on_interpolants(k, rng):
    op = ops_of(PENTAGON, k)
    e = op.element
    for _ in range(5):
        _, w = random_poly(e, k + 1, rng)
        comps = e.to_components(interpolate_local(e, w))
        assert np.abs(op.Delta @ comps).max() < 1e-10


def test_difference_operators_composition(rng):
    op = ops_of(TRIANGLE, 2)
    v = rng.standard_normal(op.element.n_scalar)
    assert np.allclose(op.Delta @ np.zeros_like(v), 0)
    assert np.allclose(op.Delta @ v, op.I_high @ (op.R @ v) - v, atol=1e-12)


# --------------------------------------------------------------------------- viscous stabilization


@pytest.mark.parametrize("shape", list(SHAPES))
@pytest.mark.parametrize("k", [0, 1, 2])
def test_hho_stabilization_properties(shape, k, rng):
    op = ops_of(SHAPES[shape], k)
    e = op.element
    a_nu = op.A_nu
    assert np.allclose(a_nu, a_nu.T, atol=1e-12 * np.abs(a_nu).max())
    assert np.linalg.eigvalsh(a_nu).min() >= -1e-11 * np.abs(a_nu).max()
    s = e.vectorize(op.S_visc)
    for _ in range(20):
        _, w = random_poly(e, k + 1, rng)
        iw = interpolate_local(e, w)
        v = rng.standard_normal(e.n_vector)
        assert abs(v @ s @ iw) <= 1e-10 * np.linalg.norm(v) * np.linalg.norm(iw) * np.abs(s).max()


@pytest.mark.parametrize("k", [0, 1, 2])
def test_ldgh_violates_polynomial_consistency(k, rng):
    op = ops_of(PENTAGON, k, choice=LDGH)
    e = op.element
    s = e.vectorize(op.S_visc)
    # w in P^{k+1} \ P^k: the cell projection loses the top degree, face traces keep it
    high = e.cell.basis(k + 1)
    coef = np.zeros((high.dim, 2))
    coef[-1, 0] = 1.0
    iw = interpolate_local(e, lambda p: high.eval(p) @ coef)
    assert iw @ s @ iw > 1e-6
    # still consistent on P^k
    _, wk = random_poly(e, k, rng)
    iwk = interpolate_local(e, wk)
    assert abs(iwk @ s @ iwk) < 1e-12


def test_ldgh_parameter_parsing():
    assert ViscousStabilization.parse("ldgh:2").eta == 2.0
    assert ViscousStabilization.parse("hho").kind == "hho"
    with pytest.raises(ValueError):
        ViscousStabilization.parse("hho:3")
    with pytest.raises(ValueError):
        ViscousStabilization.parse("ldgh:-1")


def test_viscous_norm_equivalence_refinement_stable():
    data = ProblemData(nu=1.0, mu=1.0)
    bounds = []
    for size in (1.0, 0.5, 0.25):
        op = ops_of(np.array(SQUARE) * size, 1, data)
        a = op.A_nu
        n1 = op.norm_1()
        # generalized eigenvalues on the complement of the common kernel (constants)
        vals, vecs = np.linalg.eigh(n1)
        keep = vals > 1e-10 * vals.max()
        basis = vecs[:, keep] / np.sqrt(vals[keep])
        ev = np.linalg.eigvalsh(basis.T @ a @ basis)
        bounds.append((ev.min(), ev.max()))
    lows, highs = zip(*bounds)
    assert min(lows) > 0 and np.isfinite(max(highs))
    assert max(lows) / min(lows) < 1.01 and max(highs) / min(highs) < 1.01


def test_stabilization_consistency_decay():
    w = lambda p: np.column_stack([np.sin(p[:, 0]) * np.sin(p[:, 1]), np.cos(p[:, 0]) * np.cos(p[:, 1])])
    k = 1
    ratios = []
    for size in (0.4, 0.2, 0.1, 0.05):
        op = ops_of(np.array(PENTAGON) * size + 0.3, k, ProblemData(nu=1.0, mu=1.0))
        e = op.element
        iw = interpolate_local(e, w)
        s = math.sqrt(max(iw @ e.vectorize(op.S_visc) @ iw, 0.0))
        # |w|_{H^{k+2}(T)} scales like |T|^{1/2}
        ratios.append(s / (e.cell.diameter ** (k + 1) * math.sqrt(e.cell.area)))
    assert max(ratios) / min(ratios) < 3.0


# --------------------------------------------------------------------------- advection


@pytest.mark.parametrize("k", [0, 1, 2])
def test_advective_derivative_identity(k, rng):
    op = ops_of(PENTAGON, k)
    e = op.element
    cell = e.cell
    rule = cell.quadrature(e.qdeg)
    phi = cell.basis(k).eval(rule.points)
    dphi = cell.basis(k).grad(rule.points)
    beta = ROTATION.beta(rule.points)
    v = rng.standard_normal(e.n_scalar)
    lhs = op.mass @ (op.G @ v)
    rhs = phi.T @ (rule.weights * (np.einsum("qd,qjd,j->q", beta, dphi, v[: e.nk])))
    for i, (face, n) in enumerate(zip(e.faces, e.normals)):
        fr = face.quadrature(e.qdeg)
        sigma = ROTATION.beta(fr.points) @ n
        pf = cell.basis(k).eval(fr.points)
        jump = face.basis(k).eval(fr.points) @ v[e.scalar_face_slice(i)] - pf @ v[: e.nk]
        rhs += pf.T @ (fr.weights * sigma * jump)
    assert np.allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max())


def test_advective_derivative_constant_beta(rng):
    data = ProblemData(nu=1.0, beta=lambda p: np.tile([0.7, -0.4], (len(p), 1)), mu=1.0)
    op = ops_of(PENTAGON, 2, data)
    e = op.element
    coef, w = random_poly(e, 2, rng)
    g = op.G @ e.to_components(interpolate_local(e, w))
    # (beta . grad) w in the cell basis, by projection
    basis = e.cell.basis(2)
    expected = l2_project(e.cell, 2, lambda p: np.einsum("qid,d,ic->qc", basis.grad(p), [0.7, -0.4], coef))
    assert np.allclose(g, expected, atol=1e-11)


def test_zero_beta():
    data = ProblemData(nu=1.0, mu=2.0)
    op = ops_of(PENTAGON, 1, data)
    e = op.element
    assert np.allclose(op.G, 0)
    expected = np.zeros((e.n_scalar, e.n_scalar))
    expected[: e.nk, : e.nk] = 2.0 * op.mass
    assert np.allclose(op.A_bm, e.vectorize(expected), atol=1e-14)


def test_upwind_weights():
    s = np.linspace(-5, 5, 11)
    adv = AdvectiveStabilization()
    assert np.allclose(adv.a_minus(s), 0.5 * (np.abs(s) - s))


# --------------------------------------------------------------------------- A-function families


def test_a_hat_conditions():
    assert check_a_hat(a_hat_upwind) == pytest.approx(1.0)
    assert check_a_hat(a_hat_theta(0.75)) == pytest.approx(0.5)
    assert 0 < check_a_hat(a_hat_scharfetter_gummel) <= 1
    with pytest.raises(ValueError):
        check_a_hat(a_hat_theta(0.5))
    with pytest.raises(ValueError):
        check_a_hat(lambda s: s)  # not symmetric / not positive
    with pytest.raises(ValueError):
        a_hat_theta(1.5)


def test_scharfetter_gummel_smooth_at_zero():
    s = np.array([-2e-3, -1e-3, -1e-9, 0.0, 1e-9, 1e-3, 2e-3])
    vals = a_hat_scharfetter_gummel(s)
    assert vals[3] == 0.0
    assert np.allclose(vals, s**2 / 6, rtol=1e-5, atol=1e-20)
    big = a_hat_scharfetter_gummel(np.array([50.0, -50.0]))
    assert np.allclose(big, 48.0)


def test_stabilization_choice_parsing():
    assert AdvectiveStabilization.parse("theta:0.75").theta == 0.75
    assert AdvectiveStabilization.parse("scharfetter-gummel").kind == "scharfetter-gummel"
    with pytest.raises(ValueError):
        AdvectiveStabilization.parse("central")
    with pytest.raises(ValueError):
        StabilizationChoice(advective=AdvectiveStabilization("theta", 0.5))


# --------------------------------------------------------------------------- divergence


def test_divergence_identity(rng):
    op = ops_of(PENTAGON, 2)
    e = op.element
    cell = e.cell
    rule = cell.quadrature(e.qdeg)
    phi = cell.basis(2).eval(rule.points)
    dphi = cell.basis(2).grad(rule.points)
    v = rng.standard_normal(e.n_vector)
    comps = e.to_components(v)
    lhs = op.mass @ (op.D @ v)
    rhs = -np.einsum("q,qid,qd->i", rule.weights, dphi, phi @ comps[: e.nk])
    for i, (face, n) in enumerate(zip(e.faces, e.normals)):
        fr = face.quadrature(e.qdeg)
        vf = face.basis(2).eval(fr.points) @ comps[e.scalar_face_slice(i)]
        rhs += cell.basis(2).eval(fr.points).T @ (fr.weights * (vf @ n))
    assert np.allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max())
    assert np.allclose(op.B, -op.mass @ op.D)


def test_divergence_commutes_with_interpolation():
    op = ops_of(PENTAGON, 2)
    e = op.element
    v = lambda p: np.column_stack([p[:, 0] ** 2 * p[:, 1], p[:, 0] - p[:, 1] ** 3])
    div = lambda p: 2 * p[:, 0] * p[:, 1] - 3 * p[:, 1] ** 2
    assert np.allclose(op.D @ interpolate_local(e, v), l2_project(e.cell, 2, div), atol=1e-11)
    const = interpolate_local(e, lambda p: np.tile([1.0, 2.0], (len(p), 1)))
    assert np.allclose(op.D @ const, 0, atol=1e-12)
    sol = interpolate_local(e, lambda p: np.column_stack([p[:, 0], -p[:, 1]]))
    assert np.allclose(op.D @ sol, 0, atol=1e-12)


# --------------------------------------------------------------------------- reference quantities


def test_reference_quantities_no_advection():
    ref = local_reference_quantities(element_of(SQUARE, 1), ProblemData(nu=1.0, mu=2.0))
    assert (ref.vref, ref.tau, ref.peclet) == (0.0, 0.5, 0.0)


def test_face_peclet_direct_formula():
    tri = np.array([[0, 0], [0.1, 0], [0, 0.1]]) / math.sqrt(2)  # h_T = 0.1
    data = ProblemData(nu=0.01, beta=lambda p: np.tile([1.0, 0.0], (len(p), 1)), mu=1.0)
    e = element_of(tri, 0)
    ref = local_reference_quantities(e, data)
    assert e.cell.diameter == pytest.approx(0.1)
    # the vertical face has sigma = -1, so |Pe_TF| = 10 there
    assert ref.peclet == pytest.approx(10.0)


def test_reference_time_degenerate():
    data = ProblemData(nu=1.0, beta=lambda p: np.tile([1.0, 0.0], (len(p), 1)))
    e = element_of(SQUARE, 0)
    with pytest.raises(UndefinedReferenceTime, match="drop"):
        local_reference_quantities(e, data)
    ref = local_reference_quantities(e, data, allow_degenerate=True)
    assert math.isinf(ref.tau) and ref.tau_inv == 0.0


def test_kovasznay_reference_quantities_vs_dense_sampling():
    case = kovasznay_case(1.0)
    verts = [[0.0, 0.0], [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]
    ref = local_reference_quantities(element_of(verts, 1), case.data)
    g = np.linspace(0, 0.5, 100)
    pts = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    vref = np.linalg.norm(case.u(pts), axis=1).max()
    lip = np.linalg.norm(case.grad_u(pts), axis=2).max()
    assert ref.vref == pytest.approx(vref, rel=0.02)
    assert ref.lipschitz == pytest.approx(lip, rel=0.02)


def test_problem_data_divergence_and_jacobian():
    assert ROTATION.divergence_residual(np.random.default_rng(0).uniform(size=(50, 2))) <= 1e-10
    est = ProblemData(nu=1.0, beta=lambda p: np.column_stack([p[:, 1], -p[:, 0]]))
    assert est.lipschitz_estimated
    assert np.allclose(est.jacobian(np.array([[0.3, 0.2]])), [[[0, 1], [-1, 0]]], atol=1e-8)
    with pytest.raises(ValueError):
        ProblemData(nu=0.0)
    with pytest.raises(ValueError):
        ProblemData(nu=1.0, mu=-1.0)
