import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epsrecon.errors import UsageError
from epsrecon.mesh import build_box_mesh, make_time_grid, refine_uniform
from epsrecon.pde import (
    Assembler,
    NeumannData,
    ObservationData,
    adjoint_residual,
    adjoint_solve,
    direct_residual,
    direct_solve,
    time_matrices,
    weak_form_A,
    weak_form_D,
    weighted_time_mass,
)
from epsrecon.spaces import ScalarSpace, SpaceTimeField, interpolate

from oracles import weak_A, weak_D


def random_field(mesh, grid, rng, kind=None):
    v = rng.standard_normal((grid.n_steps + 1, mesh.n_vertices, mesh.dim))
    if kind == "dir":
        v[0] = 0
    if kind == "adj":
        v[-1] = 0
    return SpaceTimeField(mesh, grid, v, kind)


def pulse(mesh, grid):
    top = np.isclose(mesh.vertices[mesh.boundary_nodes, 1], mesh.bounds[1][1])
    s = np.sin(2 * np.pi * np.clip(grid.nodes, 0, 0.5) * 2)
    vals = s[:, None, None] * top[None, :, None] * np.array([1.0, 0.0])
    return NeumannData(mesh, grid, vals)


def bump(mesh, degree=1):
    return interpolate(lambda x: 1 + 0.8 * np.exp(-20 * np.sum((x - 0.5) ** 2, axis=1)), ScalarSpace(mesh, degree))


@pytest.fixture
def setup(rng):
    mesh = build_box_mesh((0, 0), (1, 1), 2)
    grid = make_time_grid(1.0, 4)
    eps = interpolate(lambda x: 1 + x[:, 0] + 0.5 * x[:, 1] ** 2, ScalarSpace(mesh))
    return mesh, grid, eps


# -- time matrices ----------------------------------------------------------------
def test_time_matrices_exact():
    grid = make_time_grid(2.0, 5)
    Tm, Ts = time_matrices(grid)
    ones = np.ones(6)
    assert np.isclose(ones @ Tm @ ones, 2.0)
    assert np.allclose(Ts @ ones, 0)
    t = grid.nodes
    assert np.isclose(t @ Ts @ t, 2.0)  # int (d t/dt)^2
    assert np.isclose(t @ Tm @ t, 8 / 3)
    W = weighted_time_mass(grid, lambda s: 1 + 0 * s)
    np.testing.assert_allclose(W, Tm, atol=1e-14)


# -- weak forms against straight-loop oracles ----------------------------------------
def test_weak_D_matches_oracle(setup, rng):
    mesh, grid, eps = setup
    E = random_field(mesh, grid, rng, "dir")
    phi = random_field(mesh, grid, rng, "adj")
    P = NeumannData(mesh, grid, rng.standard_normal((grid.n_steps + 1, len(mesh.boundary_nodes), 2)))
    got = weak_form_D(eps, E, phi, P)
    want = weak_D(mesh, grid, eps.values, E.values, phi.values, P.full())
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_weak_A_matches_oracle(setup, rng):
    mesh, grid, eps = setup
    E = random_field(mesh, grid, rng, "dir")
    lam = random_field(mesh, grid, rng, "adj")
    phi = random_field(mesh, grid, rng, "dir")
    G = ObservationData(mesh, grid, rng.standard_normal((grid.n_steps + 1, len(mesh.boundary_nodes), 2)))
    z = lambda t: 1.0 - 0.5 * t
    got = weak_form_A(eps, lam, phi, E, G, z)
    want = weak_A(mesh, grid, eps.values, lam.values, phi.values, E.values, G.full(), z)
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_weak_D_constant_in_space_hand_value(square2, rng):
    """Constant fields: D = -eps |Omega| sum_k tau e'_k . phi'_k."""
    grid = make_time_grid(1.0, 2)
    eps = interpolate(2.0, ScalarSpace(square2))
    e = np.array([[0, 0], [1.0, -2.0], [0.5, 3.0]])
    p = np.array([[1.0, 1.0], [-2.0, 0.5], [0, 0]])
    E = SpaceTimeField(square2, grid, np.repeat(e[:, None, :], 4, axis=1), "dir")
    phi = SpaceTimeField(square2, grid, np.repeat(p[:, None, :], 4, axis=1), "adj")
    tau = grid.tau
    hand = -2.0 * 1.0 * sum(tau * (np.diff(e, axis=0)[k] / tau) @ (np.diff(p, axis=0)[k] / tau) for k in range(2))
    assert abs(weak_form_D(eps, E, phi) - hand) <= 1e-12


def test_weak_forms_trivial_cases(setup, rng):
    mesh, grid, eps = setup
    E = random_field(mesh, grid, rng, "dir")
    zero_adj = SpaceTimeField.zeros(mesh, grid, "adj")
    assert weak_form_D(eps, E, zero_adj) == 0
    phi = random_field(mesh, grid, rng, "adj")
    assert weak_form_D(eps, SpaceTimeField.zeros(mesh, grid, "dir"), phi, NeumannData.zeros(mesh, grid)) == 0
    # lambda = 0 and E = G on the boundary
    lam0 = SpaceTimeField.zeros(mesh, grid, "adj")
    G = ObservationData.from_field(E)
    assert abs(weak_form_A(eps, lam0, random_field(mesh, grid, rng, "dir"), E, G, lambda t: 1 + t)) <= 1e-14
    assert weak_form_A(eps, lam0, SpaceTimeField.zeros(mesh, grid, "dir"), E,
                       ObservationData.zeros(mesh, grid), lambda t: 1 + t) == 0


def test_weak_A_reduces_to_boundary_term(setup, rng):
    mesh, grid, _ = setup
    eps = interpolate(3.0, ScalarSpace(mesh))
    E = random_field(mesh, grid, rng, "dir")
    G = ObservationData(mesh, grid, rng.standard_normal((grid.n_steps + 1, len(mesh.boundary_nodes), 2)))
    c = rng.standard_normal(2)
    phi = SpaceTimeField(mesh, grid, np.concatenate([np.zeros((1, mesh.n_vertices, 2)),
                         np.tile(c, (grid.n_steps, mesh.n_vertices, 1))]), "dir")
    z = lambda t: 2.0 - t
    lam = SpaceTimeField.zeros(mesh, grid, "adj")
    from oracles import boundary_pairs
    want = boundary_pairs(mesh, E.values - G.full(), phi.values, grid, weight=lambda t: z(t) ** 2)
    assert abs(weak_form_A(eps, lam, phi, E, G, z) - want) <= 1e-12 * abs(want)


def test_weak_form_preconditions(setup, rng):
    mesh, grid, eps = setup
    E = random_field(mesh, grid, rng, "dir")
    with pytest.raises(UsageError):
        weak_form_D(eps, E, random_field(mesh, grid, rng))
    with pytest.raises(UsageError):
        weak_form_D(eps, random_field(mesh, grid, rng), random_field(mesh, grid, rng, "adj"))
    other = build_box_mesh((0, 0), (1, 1), 3)
    with pytest.raises(UsageError):
        weak_form_D(interpolate(1.0, ScalarSpace(other)), E, random_field(mesh, grid, rng, "adj"))
    with pytest.raises(UsageError):
        weak_form_A(eps, random_field(mesh, grid, rng, "adj"), random_field(mesh, grid, rng), E,
                    ObservationData.zeros(mesh, grid), lambda t: 1)


# -- solvers ---------------------------------------------------------------------------
def test_zero_source_gives_zero_field(setup):
    mesh, grid, eps = setup
    E = direct_solve(eps, NeumannData.zeros(mesh, grid))
    assert np.all(E.values == 0)


def test_direct_galerkin_orthogonality(mesh4):
    grid = make_time_grid(1.0, 12)
    eps = bump(mesh4)
    P = pulse(mesh4, grid)
    E = direct_solve(eps, P)
    assert np.all(E.values[0] == 0)
    R, scale = direct_residual(eps, E, P)
    # every test function of the adjoint space: rows 0..N-1
    assert np.abs(R[:-1]).max() <= 1e-8 * scale


def test_adjoint_galerkin_orthogonality(mesh4, rng):
    grid = make_time_grid(1.0, 12)
    eps = bump(mesh4)
    E = direct_solve(eps, pulse(mesh4, grid))
    G = ObservationData(mesh4, grid, rng.standard_normal(E.values[:, mesh4.boundary_nodes].shape) * 0.1)
    z = lambda t: np.minimum(1.0, 2 * (1 - t))
    lam = adjoint_solve(eps, E, G, z)
    assert np.all(lam.values[-1] == 0)
    R, scale = adjoint_residual(eps, lam, E, G, z)
    assert np.abs(R[1:]).max() <= 1e-8 * scale


def test_iterative_solves_match_direct(mesh4):
    grid = make_time_grid(1.0, 12)
    eps = bump(mesh4)
    P = pulse(mesh4, grid)
    E = direct_solve(eps, P)
    Eg = direct_solve(eps, P, rtol=1e-12)
    assert np.abs(E.values - Eg.values).max() <= 1e-9 * np.abs(E.values).max()
    G = ObservationData.zeros(mesh4, grid)
    lam = adjoint_solve(eps, E, G, lambda t: 1 + 0 * t)
    lamg = adjoint_solve(eps, E, G, lambda t: 1 + 0 * t, rtol=1e-12)
    assert np.abs(lam.values - lamg.values).max() <= 1e-9 * np.abs(lam.values).max()


def test_adjoint_vanishes_for_matching_data(mesh4):
    grid = make_time_grid(1.0, 8)
    eps = bump(mesh4)
    E = direct_solve(eps, pulse(mesh4, grid))
    lam = adjoint_solve(eps, E, ObservationData.from_field(E), lambda t: 1 + 0 * t)
    assert np.all(lam.values == 0)
    lam = adjoint_solve(eps, E, ObservationData.zeros(mesh4, grid), lambda t: 0 * t)
    assert np.all(lam.values == 0)


def test_adjoint_consistency(mesh4, rng):
    """D(eps, E_h, lambda_h) = 0 for the solved pair, and A is linear in phi."""
    grid = make_time_grid(1.0, 8)
    eps = bump(mesh4)
    P = pulse(mesh4, grid)
    E = direct_solve(eps, P)
    G = ObservationData(mesh4, grid, rng.standard_normal(E.values[:, mesh4.boundary_nodes].shape) * 0.1)
    z = lambda t: 1 + 0 * t
    lam = adjoint_solve(eps, E, G, z)
    _, scale = direct_residual(eps, E, P)
    assert abs(weak_form_D(eps, E, lam, P)) <= 1e-8 * scale * np.abs(lam.values).sum()
    a, b = random_field(mesh4, grid, rng, "dir"), random_field(mesh4, grid, rng, "dir")
    lhs = weak_form_A(eps, lam, a.copy(2 * a.values - 3 * b.values), E, G, z)
    rhs = 2 * weak_form_A(eps, lam, a, E, G, z) - 3 * weak_form_A(eps, lam, b, E, G, z)
    assert abs(lhs - rhs) <= 1e-10 * (abs(lhs) + abs(rhs))


def test_self_convergence_constant_eps():
    base = build_box_mesh((0, 0), (1, 1), 4)
    T = 1.0

    def solve(mesh, n):
        grid = make_time_grid(T, n)
        return direct_solve(interpolate(1.0, ScalarSpace(mesh)), pulse(mesh, grid))

    ref_mesh = refine_uniform(base, 6)
    ref = solve(ref_mesh, 64)
    errors = []
    for level, n in ((0, 8), (2, 16)):
        mesh = refine_uniform(base, level)
        E = solve(mesh, n)
        # compare at shared vertices and shared time nodes
        idx = [np.flatnonzero(np.all(np.isclose(ref_mesh.vertices, v), axis=1))[0] for v in mesh.vertices]
        stride = 64 // n
        diff = E.values - ref.values[::stride][:, idx]
        errors.append(np.sqrt(np.sum(diff**2) / np.sum(ref.values[::stride][:, idx] ** 2)))
    assert errors[1] < errors[0]


# -- operator properties -------------------------------------------------------------------
def test_coupling_vanishes_for_constant_eps(mesh4):
    asm = Assembler(mesh4)
    assert asm.coupling(interpolate(2.5, ScalarSpace(mesh4))).nnz == 0


@given(st.floats(1.01, 20.0))
def test_mass_scales_with_eps(c):
    mesh = build_box_mesh((0, 0), (1, 1), 3)
    asm = Assembler(mesh)
    eps = interpolate(lambda x: 1 + x[:, 0] * x[:, 1], ScalarSpace(mesh))
    M1 = asm.mass(eps).toarray()
    Mc = asm.mass(eps.copy(c * eps.values)).toarray()
    np.testing.assert_allclose(Mc, c * M1, rtol=1e-13, atol=1e-16)


def test_boundary_data_shapes(mesh4, grid8):
    with pytest.raises(UsageError):
        NeumannData(mesh4, grid8, np.zeros((3, 3, 2)))
    bad = np.zeros((grid8.n_steps + 1, len(mesh4.boundary_nodes), 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(UsageError):
        ObservationData(mesh4, grid8, bad)


def test_trace_resample_is_exact_for_bilinear_data(mesh4):
    grid = make_time_grid(1.0, 4)
    f = lambda x, t: np.stack([x[:, 0] + 2 * t, x[:, 1] - t], axis=1)
    fine = refine_uniform(mesh4, 2)
    fgrid = make_time_grid(1.0, 8)
    G = ObservationData.from_function(f, fine, fgrid)
    coarse = G.resample(mesh4, grid)
    np.testing.assert_allclose(coarse.values, ObservationData.from_function(f, mesh4, grid).values, atol=1e-13)
    back = coarse.resample(fine, fgrid)
    np.testing.assert_allclose(back.values, G.values, atol=1e-13)


def test_3d_smoke():
    mesh = build_box_mesh((0, 0, 0), (1, 1, 1), 2)
    grid = make_time_grid(0.5, 6)
    eps = interpolate(lambda x: 1 + 0.3 * x[:, 2], ScalarSpace(mesh))
    top = np.isclose(mesh.vertices[mesh.boundary_nodes, 2], 1.0)
    P = NeumannData(mesh, grid, np.sin(np.pi * grid.nodes)[:, None, None] * top[None, :, None] * np.array([1.0, 0, 0]))
    E = direct_solve(eps, P)
    R, scale = direct_residual(eps, E, P)
    assert np.abs(E.values).max() > 0
    assert np.abs(R[:-1]).max() <= 1e-8 * scale
