import numpy as np
import pytest

from spdelab import (
    DomainSpec,
    SpaceTimeField,
    build_grid,
    build_tree,
    clark_decompose,
    cond_expect,
    make_family,
    op_B,
    op_G,
    op_L,
    op_T,
    residual_bspde,
    solve_backward_pathwise,
    solve_R,
)
from spdelab.backward import BackwardSolution, ConvergenceError, backward_sweep
from spdelab.fields import inner_x0, norm_x0, norm_xk, pair_x0_dual, smooth_random_field
from spdelab.forward import solve_T_star


def make_setup(nx=41, n_steps=5, horizon=1.0, family="drift-random", domain=(0.0, 1.0)):
    dom = DomainSpec("interval", domain[0], domain[1], horizon)
    grid = build_grid(dom, nx)
    tree = build_tree(1, n_steps, horizon)
    if family == "drift-random":
        coeffs = make_family("drift-random", {"kappa": 0.25, "sigma": [0.6, 0.8], "d": 1})
    else:
        coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    return dom, grid, tree, coeffs


def leaf_enumerated_U(g, coeffs, grid, tree, theta=1.0):
    """Oracle: pathwise solves for every leaf, stacked (n_leaves, N+1, nx)."""
    return np.array([
        solve_backward_pathwise(g, coeffs, leaf, grid, tree, theta)
        for leaf in range(tree.n_leaves)
    ])


def test_pathwise_zero_source():
    _, grid, tree, coeffs = make_setup()
    g = SpaceTimeField.zeros(grid, tree)
    U = solve_backward_pathwise(g, coeffs, 0, grid, tree)
    assert np.all(U == 0.0)


def test_pathwise_exit_time_oracle():
    # f=0, beta=1, g=1, T=4: U(x, 0) approaches x(1-x), the exit-time mean
    # of Brownian motion from the unit interval
    dom = DomainSpec("interval", 0.0, 1.0, 4.0)
    grid = build_grid(dom, 201)
    tree = build_tree(1, 8, 4.0)
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    g = SpaceTimeField.from_function(grid, tree, lambda x, t, w1: np.ones_like(x) + 0 * w1)
    for lev in g.levels:
        lev[:, 0] = lev[:, -1] = 0.0
    U = solve_backward_pathwise(g, coeffs, 0, grid, tree)
    exact = grid.x * (1.0 - grid.x)
    err = np.abs(U[0] - exact).max()
    assert err <= 0.02 * exact.max()


def test_pathwise_nonrandom_leaf_independent():
    _, grid, tree, coeffs = make_setup(family="constant")
    g = smooth_random_field(grid, tree, seed=3, noise_weight=0.0)
    U0 = solve_backward_pathwise(g, coeffs, 0, grid, tree)
    U1 = solve_backward_pathwise(g, coeffs, tree.n_leaves - 1, grid, tree)
    assert np.allclose(U0, U1, atol=1e-14)


def test_op_T_matches_leaf_enumeration():
    _, grid, tree, coeffs = make_setup()
    g = smooth_random_field(grid, tree, seed=7)
    v = op_T(g, coeffs, grid, tree)
    U = leaf_enumerated_U(g, coeffs, grid, tree)
    for k in (0, 2, tree.n_steps):
        expect = cond_expect(U[:, k, :], k, tree)
        assert np.max(np.abs(expect - v.levels[k])) < 1e-12


def test_op_T_zero_and_terminal():
    _, grid, tree, coeffs = make_setup()
    z = SpaceTimeField.zeros(grid, tree)
    v = op_T(z, coeffs, grid, tree)
    assert norm_x0(v) == 0.0
    g = smooth_random_field(grid, tree, seed=8)
    v = op_T(g, coeffs, grid, tree)
    assert np.all(v.levels[tree.n_steps] == 0.0)
    for lev in v.levels:
        assert np.all(lev[:, 0] == 0.0) and np.all(lev[:, -1] == 0.0)


def test_op_G_is_clark_kernel_diagonal():
    # the kernels are the martingale-representation kernels of U(x, t, .)
    # on the diagonal: cross-check against clark_decompose of the
    # leaf-enumerated pathwise solutions at several (x, t)
    _, grid, tree, coeffs = make_setup()
    g = smooth_random_field(grid, tree, seed=9)
    X = op_G(g, coeffs, grid, tree)
    U = leaf_enumerated_U(g, coeffs, grid, tree)
    for k, ix in ((1, 11), (3, 25)):
        dec = clark_decompose(U[:, k, ix], tree)
        rec = dec.reconstruct(tree)
        assert np.max(np.abs(rec - U[:, k, ix])) <= 1e-12 * max(np.abs(U[:, k, ix]).max(), 1e-12)
        assert np.max(np.abs(dec.kernels[k][:, 0] - X[0].levels[k][:, ix])) < 1e-12


def test_op_G_vanishes_for_nonrandom_data():
    _, grid, tree, coeffs = make_setup(family="constant")
    g = smooth_random_field(grid, tree, seed=10, noise_weight=0.0)
    X = op_G(g, coeffs, grid, tree)
    assert norm_x0(X[0]) <= 1e-12 * norm_x0(g)


def test_op_G_zero_source():
    _, grid, tree, coeffs = make_setup()
    X = op_G(SpaceTimeField.zeros(grid, tree), coeffs, grid, tree)
    assert norm_x0(X[0]) == 0.0


def test_operators_linear():
    _, grid, tree, coeffs = make_setup()
    g1 = smooth_random_field(grid, tree, seed=11)
    g2 = smooth_random_field(grid, tree, seed=12)
    a, b = 0.7, -1.3
    combo = a * g1 + b * g2
    for op in (op_T, op_B):
        lhs = op(combo, coeffs, grid, tree)
        rhs = a * op(g1, coeffs, grid, tree) + b * op(g2, coeffs, grid, tree)
        scale = max(norm_x0(lhs), 1e-300)
        assert norm_x0(lhs - rhs) <= 1e-10 * scale
    lhsG = op_G(combo, coeffs, grid, tree)[0]
    rhsG = a * op_G(g1, coeffs, grid, tree)[0] + b * op_G(g2, coeffs, grid, tree)[0]
    assert norm_x0(lhsG - rhsG) <= 1e-10 * max(norm_x0(lhsG), 1e-300)


def test_op_B_zero_cases():
    _, grid, tree, coeffs = make_setup(family="constant")
    g = smooth_random_field(grid, tree, seed=13, noise_weight=0.0)
    assert norm_x0(op_B(g, coeffs, grid, tree)) <= 1e-12 * norm_x0(g)
    _, grid, tree, coeffs = make_setup()
    assert norm_x0(op_B(SpaceTimeField.zeros(grid, tree), coeffs, grid, tree)) == 0.0


def test_op_B_nonzero_and_scales():
    _, grid, tree, coeffs = make_setup()
    g = smooth_random_field(grid, tree, seed=14)
    bg = op_B(g, coeffs, grid, tree)
    assert norm_x0(bg) > 0.0
    bg2 = op_B(2.0 * g, coeffs, grid, tree)
    assert norm_x0(bg2 - 2.0 * bg) <= 1e-10 * norm_x0(bg2)


def test_solve_R_identity_when_B_vanishes():
    _, grid, tree, coeffs = make_setup(family="constant")
    phi = smooth_random_field(grid, tree, seed=15, noise_weight=0.0)
    g, info = solve_R(phi, coeffs, grid, tree)
    assert info["iterations"] == 1
    assert norm_x0(g - phi) <= 1e-12 * norm_x0(phi)


def test_solve_R_zero_input():
    _, grid, tree, coeffs = make_setup()
    g, info = solve_R(SpaceTimeField.zeros(grid, tree), coeffs, grid, tree)
    assert norm_x0(g) == 0.0 and info["iterations"] == 0


def test_solve_R_uniqueness_probe():
    _, grid, tree, coeffs = make_setup()
    phi = smooth_random_field(grid, tree, seed=16)
    tol = 1e-9
    g_a, _ = solve_R(phi, coeffs, grid, tree, tol=tol, x0=SpaceTimeField.zeros(grid, tree))
    g_b, _ = solve_R(phi, coeffs, grid, tree, tol=tol, x0=phi)
    assert norm_x0(g_a - g_b) <= 10 * tol * norm_x0(phi)


def test_solve_R_residual_contract():
    _, grid, tree, coeffs = make_setup()
    phi = smooth_random_field(grid, tree, seed=17)
    g, info = solve_R(phi, coeffs, grid, tree, tol=1e-10)
    bg = op_B(g, coeffs, grid, tree)
    assert norm_x0(g + bg - phi) <= 1.0001 * 1e-10 * norm_x0(phi)
    assert info["residual_history"][0] > info["residual"]


def test_solve_R_nonconvergence_raises():
    _, grid, tree, coeffs = make_setup()
    phi = smooth_random_field(grid, tree, seed=18)
    with pytest.raises(ConvergenceError):
        solve_R(phi, coeffs, grid, tree, tol=1e-14, max_iter=2)


def test_op_L_structure_and_exit_oracle():
    dom = DomainSpec("interval", 0.0, 1.0, 4.0)
    grid = build_grid(dom, 201)
    tree = build_tree(1, 8, 4.0)
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    phi = SpaceTimeField.from_function(grid, tree, lambda x, t, w1: np.ones_like(x) + 0 * w1)
    for lev in phi.levels:
        lev[:, 0] = lev[:, -1] = 0.0
    sol = op_L(phi, coeffs, grid, tree)
    assert isinstance(sol, BackwardSolution)
    exact = grid.x * (1 - grid.x)
    assert np.abs(sol.v.levels[0][0] - exact).max() <= 0.02 * exact.max()
    # nonrandom data: L phi = plain backward solve of phi
    U = solve_backward_pathwise(phi, coeffs, 0, grid, tree)
    assert np.allclose(sol.v.levels[0][0], U[0], atol=1e-9)
    assert norm_x0(sol.kernels[0]) <= 1e-12


def test_op_L_zero():
    _, grid, tree, coeffs = make_setup()
    sol = op_L(SpaceTimeField.zeros(grid, tree), coeffs, grid, tree)
    assert norm_x0(sol.v) == 0.0
    assert norm_x0(sol.kernels[0]) == 0.0


def test_residual_bspde_zero_solution():
    _, grid, tree, coeffs = make_setup()
    sol = BackwardSolution(
        v=SpaceTimeField.zeros(grid, tree),
        kernels=[SpaceTimeField.zeros(grid, tree)],
    )
    assert residual_bspde(sol, SpaceTimeField.zeros(grid, tree), coeffs, grid, tree) == 0.0


def test_residual_bspde_refinement_halving():
    # nonrandom data: the trapezoidal residual is O(dt), halving when dt and
    # dx^2 are halved together
    def resid(nx, n_steps):
        dom = DomainSpec("interval", 0.0, 1.0, 1.0)
        grid = build_grid(dom, nx)
        tree = build_tree(1, n_steps, 1.0)
        coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
        g = smooth_random_field(grid, tree, seed=20, noise_weight=0.0)
        res = backward_sweep(g, coeffs, grid, tree, want_v=True, want_kernels=True)
        sol = BackwardSolution(v=res["v"], kernels=res["kernels"])
        return residual_bspde(sol, g, coeffs, grid, tree)

    coarse = resid(29, 4)
    fine = resid(41, 8)
    assert coarse > 0
    assert fine <= 0.65 * coarse


def test_residual_bspde_detects_corrupted_kernel():
    _, grid, tree, coeffs = make_setup()
    g = smooth_random_field(grid, tree, seed=21)
    res = backward_sweep(g, coeffs, grid, tree, want_v=True, want_kernels=True)
    sol = BackwardSolution(v=res["v"], kernels=res["kernels"])
    base = residual_bspde(sol, g, coeffs, grid, tree)
    corrupted = [res["kernels"][0].copy()]
    for k in range(tree.n_steps):
        corrupted[0].levels[k][:, 1:-1] += 1.0
    bad = residual_bspde(BackwardSolution(v=res["v"], kernels=corrupted), g, coeffs, grid, tree)
    assert bad - base > 0.1


def test_martingale_property_of_conditional_expectations():
    # level-s conditional expectations of U(x,t,.) form a martingale whose
    # increments reproduce the Clark kernels; reconstruction is exact
    _, grid, tree, coeffs = make_setup(n_steps=4)
    g = smooth_random_field(grid, tree, seed=22)
    U = leaf_enumerated_U(g, coeffs, grid, tree)
    k, ix = 2, 17
    X = U[:, k, ix]
    means = [cond_expect(X, s, tree) for s in range(tree.n_steps + 1)]
    dec = clark_decompose(X, tree)
    for s in range(tree.n_steps):
        child = means[s + 1].reshape(-1, tree.branching)
        increments = child - means[s][:, None]
        predicted = dec.kernels[s][:, 0:1] * (tree.digit_signs[:, 0] * tree.sqdt)[None, :]
        assert np.max(np.abs(increments - predicted)) < 1e-12


def test_norm_boundedness_probe():
    # ratio ||op_T g||_X1 / ||g||_X-1 stays bounded across refinement
    ratios = []
    for nx, n_steps in ((41, 4), (81, 8)):
        dom = DomainSpec("interval", 0.0, 1.0, 1.0)
        grid = build_grid(dom, nx)
        tree = build_tree(1, n_steps, 1.0)
        coeffs = make_family("drift-random", {"kappa": 0.25, "sigma": [0.6, 0.8], "d": 1})
        g = smooth_random_field(grid, tree, seed=23)
        v = op_T(g, coeffs, grid, tree)
        ratios.append(norm_xk(v, 1) / norm_xk(g, -1))
    assert ratios[1] <= 1.5 * ratios[0]


def test_exact_discrete_duality_pairing():
    # with the Ito-predictable dual march, the cell-aligned pairing makes the
    # discrete (G, G*) pair exactly adjoint, and the (T, T*) pair exactly
    # adjoint whenever the source carries no time variation (the new-time
    # drift evaluation is then immaterial): sharp internal consistency checks
    # of the two engines against each other
    _, grid, tree, coeffs = make_setup()
    g = smooth_random_field(grid, tree, seed=24)
    h = smooth_random_field(grid, tree, seed=25)
    from spdelab.forward import solve_G_star

    X = op_G(g, coeffs, grid, tree)
    q = solve_G_star(0, h, coeffs, grid, tree)
    lhs = inner_x0(X[0], h)
    rhs = pair_x0_dual(g, q)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-6)

    h_static = SpaceTimeField.from_function(
        grid, tree, lambda x, t, w1: np.sin(np.pi * x) + 0.0 * w1
    )
    v = op_T(g, coeffs, grid, tree)
    pi = solve_T_star(h_static, coeffs, grid, tree)
    lhs = inner_x0(v, h_static)
    rhs = pair_x0_dual(g, pi)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_theta_half_scheme_consistent():
    # Crank-Nicolson marching stays consistent with the leaf oracle
    _, grid, tree, coeffs = make_setup()
    g = smooth_random_field(grid, tree, seed=26)
    v = op_T(g, coeffs, grid, tree, theta=0.5)
    U = leaf_enumerated_U(g, coeffs, grid, tree, theta=0.5)
    expect = cond_expect(U[:, 0, :], 0, tree)
    assert np.max(np.abs(expect - v.levels[0])) < 1e-12
