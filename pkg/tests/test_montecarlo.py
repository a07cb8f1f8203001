import numpy as np
import pytest

from spdelab import (
    DomainSpec,
    build_grid,
    build_tree,
    bridge_paths,
    conditional_functional,
    empirical_density,
    estimate_functional,
    free_paths,
    functional_estimate,
    make_family,
    sample_tree_paths,
    simulate,
    solve_density,
)
from spdelab.montecarlo import SimulationError, sample_from_density


@pytest.fixture
def unit_domain():
    return DomainSpec("interval", 0.0, 1.0, 1.0)


@pytest.fixture
def line_domain():
    return DomainSpec("truncated_line", -8.0, 8.0, 1.0)


def test_simulate_frozen_dynamics(line_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1e-3]})
    # beta ~ 0 within the nondegeneracy floor; scale noise away by hand instead
    paths = free_paths(1.0, M=64, d0=1, dt_mc=0.25, seed=1)
    paths.increments[:] = 0.0
    trajs = simulate(coeffs, 0.3, 0.0, paths, line_domain)
    assert np.all(trajs.snapshots == 0.3)
    assert np.all(trajs.tau == 1.0)
    assert np.all(trajs.alive)


def test_simulate_gaussian_statistics(line_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    paths = free_paths(1.0, M=20000, d0=1, dt_mc=0.01, seed=2)
    trajs = simulate(coeffs, 0.0, 0.0, paths, line_domain)
    yT = trajs.snapshots[:, -1]
    m = trajs.n_paths
    assert abs(yT.mean()) < 3.0 / np.sqrt(m)
    assert abs(yT.var() - 1.0) < 3.0 * np.sqrt(2.0 / (m - 1))


def test_simulate_exit_time_oracle(unit_domain):
    # E tau for Brownian motion from x=0.5 in (0,1) is 0.25; mesh-point exit
    # detection biases it upward by O(sqrt(dt_mc))
    dom = DomainSpec("interval", 0.0, 1.0, 4.0)
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    paths = free_paths(4.0, M=20000, d0=1, dt_mc=2e-3, seed=3)
    trajs = simulate(coeffs, 0.5, 0.0, paths, dom)
    stderr = trajs.tau.std(ddof=1) / np.sqrt(trajs.n_paths)
    bias_allowance = 0.6 * np.sqrt(2e-3) + 3 * stderr
    assert abs(trajs.tau.mean() - 0.25) <= bias_allowance
    # exited paths freeze: the alive indicator flips once and stays down
    flips = np.diff(trajs.alive.astype(int), axis=1)
    assert np.all(flips <= 0)


def test_simulate_validations(unit_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    paths = free_paths(1.0, M=4, d0=1, dt_mc=0.25, seed=4)
    with pytest.raises(SimulationError, match="outside"):
        simulate(coeffs, 1.5, 0.0, paths, unit_domain)
    with pytest.raises(SimulationError, match="d0"):
        simulate(make_family("constant", {"f0": 0.0, "sigma": [1.0, 1.0]}),
                 0.5, 0.0, paths, unit_domain)
    random_coeffs = make_family("drift-random", {"kappa": 0.2, "sigma": [1.0], "d": 1})
    with pytest.raises(SimulationError, match="tree"):
        simulate(random_coeffs, 0.5, 0.0, paths, unit_domain)


def test_estimate_functional_zero_and_linearity(unit_domain):
    dom = DomainSpec("interval", 0.0, 1.0, 1.0)
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    paths = free_paths(1.0, M=500, d0=1, dt_mc=0.02, seed=5)
    trajs = simulate(
        coeffs, 0.5, 0.0, paths, dom,
        integrands={
            "zero": lambda y, t, w1: np.zeros_like(y),
            "one": lambda y, t, w1: np.ones_like(y),
            "two": lambda y, t, w1: 2.0 * np.ones_like(y),
        },
    )
    z = estimate_functional(trajs, "zero")
    assert z.value == 0.0 and z.stderr == 0.0
    one = estimate_functional(trajs, "one")
    two = estimate_functional(trajs, "two")
    assert two.value == pytest.approx(2.0 * one.value, rel=1e-14)
    # registered integral of 1 equals tau on the mesh
    assert one.value == pytest.approx(trajs.tau.mean(), rel=1e-12)


def test_estimate_functional_callable_path(unit_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    paths = free_paths(1.0, M=200, d0=1, dt_mc=0.05, seed=6)
    trajs = simulate(coeffs, 0.5, 0.0, paths, unit_domain,
                     integrands={"sq": lambda y, t, w1: y**2}, keep_fine=True)
    via_callable = estimate_functional(trajs, lambda y, t: y**2)
    via_registered = estimate_functional(trajs, "sq")
    assert via_callable.value == pytest.approx(via_registered.value, rel=1e-12)
    with pytest.raises(SimulationError, match="registered"):
        estimate_functional(trajs, "missing")


def test_reproducibility(line_domain):
    coeffs = make_family("drift-random", {"kappa": 0.25, "sigma": [0.6, 0.8], "d": 1})
    tree = build_tree(1, 4, 1.0)

    def run():
        paths = sample_tree_paths(tree, 256, 2, 0.05, seed=7)
        return simulate(coeffs, 0.0, 0.0, paths, line_domain,
                        integrands={"phi": lambda y, t, w1: np.exp(-y**2)})

    a, b = run(), run()
    assert np.array_equal(a.snapshots, b.snapshots)
    assert np.array_equal(a.tau, b.tau)
    assert np.array_equal(a.integrals["phi"], b.integrals["phi"])


def test_exit_monotonicity(unit_domain):
    # shrinking the domain can only shorten each path's exit time
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    paths = free_paths(1.0, M=2000, d0=1, dt_mc=0.005, seed=8)
    wide = simulate(coeffs, 0.5, 0.0, paths, DomainSpec("interval", 0.0, 1.0, 1.0))
    paths2 = free_paths(1.0, M=2000, d0=1, dt_mc=0.005, seed=8)
    narrow = simulate(coeffs, 0.5, 0.0, paths2, DomainSpec("interval", 0.25, 0.75, 1.0))
    assert np.all(narrow.tau <= wide.tau + 1e-15)


def test_stderr_scaling(line_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    errs = []
    for M in (2000, 8000):
        paths = free_paths(1.0, M=M, d0=1, dt_mc=0.02, seed=9)
        trajs = simulate(coeffs, 0.0, 0.0, paths, line_domain,
                         integrands={"phi": lambda y, t, w1: np.exp(-y**2)})
        errs.append(estimate_functional(trajs, "phi").stderr)
    # quadrupling the sample halves the standard error, within 20%
    assert abs(errs[0] / errs[1] - 2.0) < 0.4


def test_empirical_density_spike(unit_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    grid = build_grid(unit_domain, 21)
    paths = free_paths(1.0, M=100, d0=1, dt_mc=0.25, seed=10)
    paths.increments[:] = 0.0
    trajs = simulate(coeffs, 0.5, 0.0, paths, unit_domain)
    hist = empirical_density(trajs, 0.0, grid)
    ix = np.argmin(np.abs(grid.x - 0.5))
    assert hist[ix] == pytest.approx(1.0 / grid.dx)
    assert hist.sum() * grid.dx == pytest.approx(1.0)


def test_empirical_density_gaussian(line_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [0.6, 0.8], "d": 1})
    grid = build_grid(line_domain, 161)
    tree = build_tree(1, 4, 1.0)
    paths = sample_tree_paths(tree, 100000, 2, 0.01, seed=11)
    trajs = simulate(coeffs, 0.0, 0.0, paths, line_domain)
    hist = empirical_density(trajs, 1.0, grid)
    ref = np.exp(-grid.x**2 / 2.0) / np.sqrt(2 * np.pi)
    assert grid.dx * np.abs(hist - ref).sum() <= 0.05


def test_empirical_density_mass_counts_alive(unit_domain):
    coeffs = make_family("constant", {"f0": 0.0, "sigma": [1.0]})
    grid = build_grid(unit_domain, 21)
    paths = free_paths(1.0, M=4000, d0=1, dt_mc=0.01, seed=12)
    trajs = simulate(coeffs, 0.5, 0.0, paths, unit_domain)
    hist = empirical_density(trajs, 1.0, grid)
    alive_fraction = trajs.alive[:, -1].mean()
    assert hist.sum() * grid.dx == pytest.approx(alive_fraction, abs=1e-12)


def test_sample_from_density_matches_cdf(line_domain):
    grid = build_grid(line_domain, 161)
    p0 = np.exp(-((grid.x - 1.0) ** 2) / 0.5)
    p0[0] = p0[-1] = 0.0
    p0 /= grid.dx * p0[1:-1].sum()
    rng = np.random.default_rng(13)
    draws = sample_from_density(p0, grid, 50000, rng)
    assert abs(draws.mean() - 1.0) < 0.02
    assert abs(draws.var() - 0.25) < 0.02


def test_conditional_functional_trivials(line_domain):
    coeffs = make_family("drift-random", {"kappa": 0.25, "sigma": [0.6, 0.8], "d": 1})
    tree = build_tree(1, 4, 1.0)
    grid = build_grid(line_domain, 161)
    p0 = np.exp(-grid.x**2)
    p0[0] = p0[-1] = 0.0
    p0 /= grid.dx * p0[1:-1].sum()
    zero = conditional_functional(
        coeffs, lambda x, t, w1: np.zeros_like(x), 3, [0.5, 1.0], 500, 14,
        tree=tree, grid=grid, domain=line_domain, p0=p0, dt_mc=0.05,
    )
    assert all(r.value == 0.0 for r in zero)
    ones = conditional_functional(
        coeffs, lambda x, t, w1: np.ones_like(x), 3, [0.5, 1.0], 4000, 15,
        tree=tree, grid=grid, domain=line_domain, p0=p0, dt_mc=0.05,
    )
    for r in ones:
        # no exits on the wide truncated line: I_tau is identically one
        assert r.value == pytest.approx(1.0, abs=1e-12)


def test_conditional_vs_unconditional_coherence(line_domain):
    # probability-weighted average over all leaf paths of the conditional
    # estimator agrees with the unconditional estimator within combined noise
    coeffs = make_family("drift-random", {"kappa": 0.25, "sigma": [0.6, 0.8], "d": 1})
    tree = build_tree(1, 2, 1.0)
    grid = build_grid(line_domain, 161)
    p0 = np.exp(-grid.x**2)
    p0[0] = p0[-1] = 0.0
    p0 /= grid.dx * p0[1:-1].sum()
    phi = lambda x, t, w1: np.exp(-x**2)
    t_pt = 1.0
    cond_vals, cond_errs = [], []
    for leaf in range(tree.n_leaves):
        r = conditional_functional(
            coeffs, phi, leaf, [t_pt], 4000, (16, leaf),
            tree=tree, grid=grid, domain=line_domain, p0=p0, dt_mc=0.05,
        )[0]
        cond_vals.append(r.value)
        cond_errs.append(r.stderr)
    avg = np.mean(cond_vals)
    avg_err = np.sqrt(np.mean(np.square(cond_errs)) / tree.n_leaves)

    # unconditional side: integral estimator of phi at the same time via
    # simulate over sampled tree paths
    paths = sample_tree_paths(tree, 16000, 2, 0.05, seed=17)
    trajs = simulate(coeffs, p0, 0.0, paths, line_domain, grid=grid)
    yT = trajs.snapshots[:, -1]
    unc = (trajs.alive[:, -1] * np.exp(-yT**2))
    tol = 3.0 * np.sqrt(avg_err**2 + unc.std(ddof=1) ** 2 / unc.size)
    assert abs(avg - unc.mean()) <= tol


def test_functional_estimate_worker_independence(line_domain):
    coeffs = make_family("drift-random", {"kappa": 0.25, "sigma": [0.6, 0.8], "d": 1})
    tree = build_tree(1, 4, 1.0)
    grid = build_grid(line_domain, 161)
    kw = dict(grid=grid, domain=line_domain, dt_mc=0.05, tree=tree, d0=2,
              chunk_size=1500)
    a = functional_estimate(coeffs, lambda y, t, w1: np.exp(-y**2), 0.0, 5000, 18, workers=1, **kw)
    b = functional_estimate(coeffs, lambda y, t, w1: np.exp(-y**2), 0.0, 5000, 18, workers=3, **kw)
    assert a.value == b.value and a.stderr == b.stderr


def test_conditional_matches_density_solver(line_domain):
    # the (6.4)-style cross-check at moderate size: conditional Monte Carlo
    # against the density solver along the same leaf path
    coeffs = make_family("drift-random", {"kappa": 0.25, "sigma": [0.6, 0.8], "d": 1})
    tree = build_tree(1, 8, 1.0)
    grid = build_grid(line_domain, 121)
    p0 = np.exp(-grid.x**2 / (2 * 0.5**2))
    p0[0] = p0[-1] = 0.0
    p0 /= grid.dx * p0[1:-1].sum()
    leaf = 0b10110101 % tree.n_leaves
    dens = solve_density(p0, coeffs, grid, tree)
    anc = tree.leaf_path(leaf)
    res = conditional_functional(
        coeffs, lambda x, t, w1: np.exp(-x**2), leaf, [0.5, 1.0], 30000, 19,
        tree=tree, grid=grid, domain=line_domain, p0=p0, dt_mc=0.0025,
    )
    for r, t in zip(res, [0.5, 1.0]):
        k = int(round(t / tree.dt))
        pde = grid.dx * float((dens.p.levels[k][anc[k]] * np.exp(-grid.x**2))[1:-1].sum())
        assert abs(pde - r.value) / abs(pde) <= 0.05
