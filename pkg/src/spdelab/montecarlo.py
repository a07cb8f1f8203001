"""Euler-Maruyama simulation with first-exit detection and estimators.

Paths follow

    y_{m+1} = y_m + f(y_m, t_m, node(t_m)) dt_mc + beta dW_m,

with the drift's noise state taken from the tree node active on the coarse
step containing t_m, so Monte Carlo and the tree solvers see the same
coefficient process.  Exits are detected at mesh points only (no crossing
correction; the O(sqrt(dt_mc)) under-detection bias is absorbed into the
acceptance tolerances); exited paths freeze and their alive indicator flips
once.  Large estimates run in fixed-size chunks whose generators derive
from the user seed by the splitting rule in `tree.seed_entropy`, so results
do not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet
from .domain import Grid
from .tree import PathBundle, ScenarioTree, bridge_paths, sample_tree_paths, seed_entropy


class SimulationError(ValueError):
    """Raised for inconsistent simulation inputs."""


@dataclass(frozen=True)
class EstimatorResult:
    value: float
    stderr: float
    n: int


@dataclass
class TrajectorySet:
    """Simulated paths: snapshots, exit data and accumulated integrals.

    Fine-mesh paths are only retained when small enough to materialize;
    integrands registered at simulation time are accumulated online so that
    functional estimates never require the full fine-mesh history.
    """

    snapshot_times: np.ndarray  # (n_snap,)
    snapshots: np.ndarray  # (M, n_snap)
    alive: np.ndarray  # (M, n_snap) bool, t <= tau
    tau: np.ndarray  # (M,)
    start_time: float
    dt_mc: float
    seed: object
    integrals: dict = field(default_factory=dict)  # name -> (M,) path integrals
    fine_times: np.ndarray | None = None
    fine_paths: np.ndarray | None = None  # (M, n_fine + 1)

    @property
    def n_paths(self) -> int:
        return self.tau.size


_KEEP_FINE_GUARD = 2_000_000


def sample_from_density(p0: np.ndarray, grid: Grid, n: int, rng) -> np.ndarray:
    """Draw from a gridded density by inverse CDF on the node values."""
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (grid.nx,) or p0.min() < -1e-12:
        raise SimulationError("p0 must be a nonnegative grid function")
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p0[1:] + p0[:-1]) * grid.dx)])
    if cdf[-1] <= 0:
        raise SimulationError("p0 has no mass")
    cdf /= cdf[-1]
    return np.interp(rng.uniform(size=n), cdf, grid.x)


def _coarse_w1(bundle: PathBundle, level: int):
    """First Wiener component at the active node of a coarse level, per path
    (None when the bundle has no tree constraint)."""
    tree = bundle.tree
    if tree is None:
        return None
    path = bundle.leaf_path
    if path.size == tree.n_steps + 1:  # single designated path
        return float(tree.omega[level][path[level], 0])
    anc = tree.ancestor_index(path, level)
    return tree.omega[level][anc, 0]


def simulate(
    coeffs: CoefficientSet,
    init,
    s: float,
    paths: PathBundle,
    domain,
    grid: Grid | None = None,
    integrands: dict | None = None,
    keep_fine: bool | None = None,
    snapshot_times=None,
) -> TrajectorySet:
    """Euler-Maruyama marching of (1.1)-type dynamics over a path bundle.

    init is either a point inside the closed domain or a gridded initial
    density (requires grid); integrands maps names to callables
    phi(y, t, w1) whose running integrals sum_{t < tau} phi dt_mc are
    accumulated online.  Deterministic given the bundle's seed.
    """
    if coeffs.d0 != paths.d0:
        raise SimulationError(
            f"coefficients have d0={coeffs.d0} but the bundle carries {paths.d0}"
        )
    if coeffs.is_random and paths.tree is None:
        raise SimulationError(
            "random coefficients require tree-constrained paths (bridge_paths "
            "or sample_tree_paths), otherwise the drift noise state is undefined"
        )
    M = paths.n_paths
    n_fine = paths.n_fine
    dt = paths.dt_mc
    m0 = s / dt
    if abs(m0 - round(m0)) > 1e-9 or not 0 <= round(m0) <= n_fine:
        raise SimulationError(f"start time {s} is not on the fine mesh")
    m0 = int(round(m0))

    if np.isscalar(init):
        y = np.full(M, float(init))
    else:
        if grid is None:
            raise SimulationError("density initial data needs the grid")
        rng = np.random.default_rng(
            np.random.SeedSequence(seed_entropy(paths.seed, 0xA11))
        )
        y = sample_from_density(init, grid, M, rng)
    lo, hi = domain.a, domain.b
    if np.any((y < lo) | (y > hi)):
        raise SimulationError("initial value outside the closed domain")

    tree = paths.tree
    n_sub = None
    if tree is not None:
        n_sub = int(round(tree.dt / dt))
    if snapshot_times is None:
        snapshot_times = tree.times() if tree is not None else np.array([0.0, paths.times[-1]])
    snapshot_times = np.asarray(snapshot_times, dtype=float)
    snap_idx = np.rint(snapshot_times / dt).astype(int)
    if np.any(np.abs(snap_idx * dt - snapshot_times) > 1e-9):
        raise SimulationError("snapshot times must lie on the fine mesh")
    snap_of = {int(m): i for i, m in enumerate(snap_idx)}

    if keep_fine is None:
        keep_fine = M * (n_fine + 1) <= _KEEP_FINE_GUARD
    fine = np.empty((M, n_fine - m0 + 1)) if keep_fine else None

    horizon = paths.times[-1]
    tau = np.full(M, horizon)
    exited = np.zeros(M, dtype=bool)
    snapshots = np.empty((M, snapshot_times.size))
    alive = np.zeros((M, snapshot_times.size), dtype=bool)
    totals = {name: np.zeros(M) for name in (integrands or {})}

    sigma = coeffs.sigma
    w1 = None
    for m in range(m0, n_fine + 1):
        t = m * dt
        if tree is not None and m < n_fine:
            level = min(m // n_sub, tree.n_steps)
            w1 = _coarse_w1(paths, level)
        if fine is not None:
            fine[:, m - m0] = y
        if m in snap_of:
            snapshots[:, snap_of[m]] = y
            alive[:, snap_of[m]] = ~exited
        if m == n_fine:
            break
        act = ~exited
        if integrands:
            for name, fn in integrands.items():
                w1a = w1[act] if isinstance(w1, np.ndarray) else w1
                totals[name][act] += np.asarray(fn(y[act], t, w1a)) * dt
        if act.any():
            w1a = w1[act] if isinstance(w1, np.ndarray) else (0.0 if w1 is None else w1)
            drift = coeffs.drift(y[act], t, w1a)
            noise = paths.increments[act, :, m] @ sigma
            y[act] = y[act] + np.broadcast_to(drift, y[act].shape) * dt + noise
            newly = act.copy()
            newly[act] = (y[act] < lo) | (y[act] > hi)
            tau[newly] = (m + 1) * dt
            exited |= newly
    return TrajectorySet(
        snapshot_times=snapshot_times,
        snapshots=snapshots,
        alive=alive,
        tau=tau,
        start_time=s,
        dt_mc=dt,
        seed=paths.seed,
        integrals=totals,
        fine_times=paths.times[m0:] if fine is not None else None,
        fine_paths=fine,
    )


def _mean_stderr(values: np.ndarray) -> EstimatorResult:
    n = values.size
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if n > 1 else 0.0
    return EstimatorResult(value=mean, stderr=sd / np.sqrt(n), n=n)


def estimate_functional(trajs: TrajectorySet, phi) -> EstimatorResult:
    """Estimate E sum_{t < tau} phi(y(t), t) dt_mc over the path set.

    phi may name an integrand registered at simulation time, or be a
    callable (which requires the fine-mesh paths to have been kept).
    """
    if isinstance(phi, str):
        if phi not in trajs.integrals:
            raise SimulationError(f"no integrand named {phi!r} was registered")
        return _mean_stderr(trajs.integrals[phi])
    if trajs.fine_paths is None:
        raise SimulationError(
            "callable integrands need the fine paths; register the integrand "
            "at simulate() time for large runs"
        )
    times = trajs.fine_times[:-1]
    # index comparison avoids last-ulp ties between accumulated exit times
    # and the mesh: a path contributes strictly before its exit step
    exit_idx = np.rint((trajs.tau - trajs.start_time) / trajs.dt_mc).astype(int)
    mask = np.arange(times.size)[None, :] < exit_idx[:, None]
    vals = phi(trajs.fine_paths[:, :-1], times[None, :])
    return _mean_stderr((np.asarray(vals) * mask).sum(axis=1) * trajs.dt_mc)


def empirical_density(trajs: TrajectorySet, t: float, grid: Grid) -> np.ndarray:
    """Histogram of alive paths at a snapshot time, normalized by M dx."""
    hit = np.nonzero(np.abs(trajs.snapshot_times - t) < 1e-9)[0]
    if hit.size:
        y = trajs.snapshots[:, hit[0]]
        ok = trajs.alive[:, hit[0]]
    elif trajs.fine_paths is not None:
        m = int(round((t - trajs.start_time) / trajs.dt_mc))
        if not 0 <= m < trajs.fine_paths.shape[1]:
            raise SimulationError(f"time {t} outside the simulated range")
        y = trajs.fine_paths[:, m]
        ok = trajs.fine_times[m] <= trajs.tau
    else:
        raise SimulationError(f"no snapshot stored at t={t}")
    edges = np.concatenate(
        [[grid.x[0] - 0.5 * grid.dx], 0.5 * (grid.x[1:] + grid.x[:-1]), [grid.x[-1] + 0.5 * grid.dx]]
    )
    counts, _ = np.histogram(y[ok], bins=edges)
    return counts / (trajs.n_paths * grid.dx)


_CHUNK_ENTRY_BUDGET = 25_000_000


def _effective_chunk(chunk_size: int, d0: int, n_fine: int) -> int:
    """Cap the chunk so each materialized bundle stays modest.  The chunk
    layout is part of the estimator's randomness stream, so it depends only
    on (requested size, d0, n_fine), never on worker count."""
    cap = max(_CHUNK_ENTRY_BUDGET // max(d0 * n_fine, 1), 1000)
    return min(chunk_size, cap)


def _run_chunks(total: int, chunk_size: int, workers: int, job):
    """Deterministic chunked execution: job(chunk_index, chunk_count) -> value;
    results are reduced in chunk order regardless of worker count."""
    sizes = []
    left = total
    while left > 0:
        sizes.append(min(chunk_size, left))
        left -= sizes[-1]
    if workers <= 1:
        return [job(i, m) for i, m in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(job, i, m) for i, m in enumerate(sizes)]
        return [f.result() for f in futs]


def conditional_functional(
    coeffs: CoefficientSet,
    phi,
    leaf_path,
    t_grid,
    M: int,
    seed,
    *,
    tree: ScenarioTree,
    grid: Grid,
    domain,
    p0: np.ndarray,
    dt_mc: float,
    chunk_size: int = 25000,
    workers: int = 1,
):
    """Common-noise estimate of E{ I_tau(t) phi(y(t), t) | leaf path } at the
    requested times: the driving components are bridged through the leaf
    path, the tail components and the initial draw from p0 stay free.

    Returns one EstimatorResult per entry of t_grid.
    """
    if not coeffs.superparabolic():
        raise SimulationError(
            "conditional estimates need d < d0 with a nondegenerate tail block"
        )
    t_grid = np.asarray(t_grid, dtype=float)
    chunk_size = _effective_chunk(chunk_size, coeffs.d0, int(round(tree.horizon / dt_mc)))

    def job(i, m):
        bundle = bridge_paths(
            tree, leaf_path, m, coeffs.d0, dt_mc, seed_entropy(seed, 0xC0, i)
        )
        trajs = simulate(
            coeffs, p0, 0.0, bundle, domain, grid=grid,
            keep_fine=False, snapshot_times=t_grid,
        )
        vals = np.empty((t_grid.size, m))
        for a, t in enumerate(t_grid):
            w1 = _coarse_w1(bundle, min(int(round(t / tree.dt)), tree.n_steps))
            vals[a] = trajs.alive[:, a] * np.asarray(
                phi(trajs.snapshots[:, a], t, w1)
            )
        return vals.sum(axis=1), (vals**2).sum(axis=1)

    out = _run_chunks(M, chunk_size, workers, job)
    s1 = np.sum([o[0] for o in out], axis=0)
    s2 = np.sum([o[1] for o in out], axis=0)
    results = []
    for a in range(t_grid.size):
        mean = s1[a] / M
        var = max(s2[a] / M - mean**2, 0.0) * M / max(M - 1, 1)
        results.append(EstimatorResult(value=float(mean), stderr=float(np.sqrt(var / M)), n=M))
    return results


def functional_estimate(
    coeffs: CoefficientSet,
    phi,
    init,
    M: int,
    seed,
    *,
    grid: Grid,
    domain,
    dt_mc: float,
    tree: ScenarioTree | None = None,
    d0: int | None = None,
    chunk_size: int = 25000,
    workers: int = 1,
) -> EstimatorResult:
    """Chunked unconditional estimate of E int_s^tau phi(y, t) dt at s = 0.

    With a tree, leaves are sampled uniformly per path and the driving
    components bridged through them (so adapted coefficients stay coupled to
    the noise); without one, plain Wiener increments are used.
    """
    d0 = coeffs.d0 if d0 is None else d0
    horizon = domain.horizon
    chunk_size = _effective_chunk(chunk_size, d0, int(round(horizon / dt_mc)))

    def job(i, m):
        chunk_seed = seed_entropy(seed, 0xF0, i)
        if tree is not None:
            bundle = sample_tree_paths(tree, m, d0, dt_mc, chunk_seed)
        else:
            from .tree import free_paths

            bundle = free_paths(horizon, m, d0, dt_mc, chunk_seed)
        trajs = simulate(
            coeffs, init, 0.0, bundle, domain, grid=grid,
            integrands={"phi": phi}, keep_fine=False,
        )
        vals = trajs.integrals["phi"]
        return vals.sum(), (vals**2).sum()

    out = _run_chunks(M, chunk_size, workers, job)
    s1 = float(np.sum([o[0] for o in out]))
    s2 = float(np.sum([o[1] for o in out]))
    mean = s1 / M
    var = max(s2 / M - mean**2, 0.0) * M / max(M - 1, 1)
    return EstimatorResult(value=mean, stderr=float(np.sqrt(var / M)), n=M)
