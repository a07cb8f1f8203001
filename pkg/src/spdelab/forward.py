"""Forward-in-time solvers for the dual problems and the density equation.

Every equation here advances by the semi-implicit step

    (I - dt A*(t_k, n_k)) u^{k+1} = u^k + dt * drift^{k+1}
                                        + sum_j noise_j^k * domega_{j,k},

fully implicit in the dual generator (with the drift source at the new
time, matching the fully implicit backward marcher) and Ito-explicit in the
stochastic term: the noise source is evaluated at the old level and at the
left time point.  The coefficients of A* are frozen predictably at the
step's left node; letting them anticipate the child state would correlate
the operator with the very increment it multiplies and leave a drift-scale
bias in the duality pairings that refinement cannot remove.  Solutions stay
adapted because each child of a node gets its own increment.  Homogeneous
Dirichlet data are imposed at every step.

Operator forms (all with zero data at t = 0 and on the boundary):

    T* h        d pi = [A* pi + h] dt
    G_j* h      d q  = A* q dt + h domega_j
    B* h        d z  = A* z dt + sum_j (div, beta_j h) domega_j
    R* pi       h = pi - z,  d z = A* z dt + sum_j (div, beta_j (pi - z)) domega_j
    L* xi       d h  = [A* h + xi] dt - sum_j (div, beta_j h) domega_j

and the density equation  d p = A* p dt - sum_j (div, beta_j p) domega_j
with initial datum p0.  R*, L* and the density equation require the
superparabolic regime (d < d0 with a nondegenerate tail block).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import rows_bands, _solve_rows
from .coefficients import CoefficientSet
from .domain import Grid, dx_centered, generator_bands, solve_tridiag, transpose_bands
from .fields import SpaceTimeField
from .tree import ScenarioTree, TreeNode


class ForwardSolverError(RuntimeError):
    """Raised on degenerate regimes, singular steps or blow-up."""


@dataclass
class ForwardState:
    """State of a forward march at one tree node."""

    values: np.ndarray
    node: TreeNode
    dt: float
    theta: float = 1.0


@dataclass
class DensitySolution:
    """Conditional density field with its mass trace and positivity audit."""

    p: SpaceTimeField
    mass: list  # per level k: (n_nodes(k),) values of int_D p dx
    min_density: list  # per level: smallest nodal value
    flagged: bool  # True when min p dips below -1e-3 * max p at some level


def _require_superparabolic(coeffs: CoefficientSet, what: str):
    if not coeffs.superparabolic():
        raise ForwardSolverError(
            f"{what} requires the superparabolic regime (d < d0 with "
            "nondegenerate beta tilde); validation failed"
        )


def step_forward(
    state: ForwardState,
    coeffs: CoefficientSet,
    drift_source,
    noise_sources,
    dw,
    grid: Grid,
    tree: ScenarioTree,
) -> ForwardState:
    """One semi-implicit step along a tree edge selected by dw.

    Solves (I - dt A*) u = state + dt * drift_source + sum_j noise_j * dw[j]
    with the dual generator frozen predictably at the current node.  dw must
    be a tree edge increment (each component +-sqrt(dt)); the child node is
    inferred from its sign pattern.  noise_sources holds one grid function
    per driving component (entries may be None).
    """
    dw = np.asarray(dw, dtype=float)
    if dw.shape != (tree.d,) or not np.allclose(np.abs(dw), tree.sqdt, rtol=1e-12):
        raise ForwardSolverError(
            f"dw must be a d-vector of +-sqrt(dt)={tree.sqdt:g}, got {dw}"
        )
    digit = int(sum((1 << j) for j in range(tree.d) if dw[j] < 0))
    child = TreeNode(state.node.level + 1, state.node.index * tree.branching + digit)
    rhs = state.values.copy()
    if drift_source is not None:
        rhs += tree.dt * np.asarray(drift_source, dtype=float)
    if noise_sources is not None:
        for j, src in enumerate(noise_sources):
            if src is not None:
                rhs += np.asarray(src, dtype=float) * dw[j]
    w1 = tree.omega[state.node.level][state.node.index, 0]
    f = coeffs.drift(grid.x_interior, state.node.level * tree.dt, w1)
    lo, dg, up = transpose_bands(*generator_bands(grid, f, coeffs.b_total))
    new = np.zeros_like(rhs)
    new[1:-1] = solve_tridiag(
        -tree.dt * lo, 1.0 - tree.dt * dg, -tree.dt * up, rhs[1:-1]
    )
    if not np.all(np.isfinite(new)):
        raise ForwardSolverError("forward step produced non-finite values")
    return ForwardState(values=new, node=child, dt=tree.dt, theta=state.theta)


def _forward_march(coeffs, grid, tree, state0, source_fn, space="X1", on_level=None):
    """March all tree paths at once with the splitting step.

    source_fn(k, state) -> (drift, noise): drift holds the level-(k+1)
    source slice entering the implicit half (or None), noise a list per
    driving component of level-k slices for the explicit kick (or None).
    """
    N, br = tree.n_steps, tree.branching
    state = np.asarray(state0, dtype=float)
    if state.shape != (1, grid.nx):
        raise ForwardSolverError("initial state must be a single root slice")
    levels = [state]
    if on_level is not None:
        on_level(0, state)
    for k in range(N):
        n_k = tree.n_nodes(k)
        drift, noise = source_fn(k, state)
        rhs = np.broadcast_to(state[:, None, :], (n_k, br, grid.nx))
        if drift is not None:
            rhs = rhs + tree.dt * drift.reshape(n_k, br, grid.nx)
        if noise is not None:
            add = np.zeros((n_k, br, grid.nx))
            for j, src in enumerate(noise):
                if src is None:
                    continue
                kick = tree.digit_signs[None, :, j, None] * tree.sqdt
                add += src[:, None, :] * kick
            rhs = rhs + add
        lo, dg, up = rows_bands(coeffs, grid, tree, k, tree.dt, dual=True)
        sol = _solve_rows(lo, dg, up, np.ascontiguousarray(rhs[..., 1:-1]))
        new = np.zeros((n_k, br, grid.nx))
        new[..., 1:-1] = sol
        state = new.reshape(n_k * br, grid.nx)
        if not np.all(np.isfinite(state)):
            raise ForwardSolverError(f"forward march lost finiteness at level {k + 1}")
        levels.append(state)
        if on_level is not None:
            on_level(k + 1, state)
    return SpaceTimeField(grid, tree, levels, space=space)


def solve_T_star(h: SpaceTimeField, coeffs, grid: Grid, tree: ScenarioTree) -> SpaceTimeField:
    """pi with d pi = [A* pi + h] dt, zero initial and boundary data."""
    return _forward_march(
        coeffs, grid, tree,
        np.zeros((1, grid.nx)),
        lambda k, state: (h.levels[k + 1], None),
    )


def solve_G_star(j: int, h: SpaceTimeField, coeffs, grid: Grid, tree: ScenarioTree) -> SpaceTimeField:
    """q with d q = A* q dt + h domega_j, zero initial and boundary data."""
    if not 0 <= j < tree.d:
        raise ForwardSolverError(f"component j={j} outside 0..{tree.d - 1}")

    def src(k, state):
        noise = [None] * tree.d
        noise[j] = h.levels[k]
        return None, noise

    return _forward_march(coeffs, grid, tree, np.zeros((1, grid.nx)), src)


def solve_B_star(h: SpaceTimeField, coeffs, grid: Grid, tree: ScenarioTree) -> SpaceTimeField:
    """z with d z = A* z dt + sum_j (div, beta_j h) domega_j."""
    sigma = coeffs.sigma

    def src(k, state):
        return None, [dx_centered(grid, sigma[j] * h.levels[k]) for j in range(tree.d)]

    return _forward_march(coeffs, grid, tree, np.zeros((1, grid.nx)), src, space="X0")


def solve_R_star(pi: SpaceTimeField, coeffs, grid: Grid, tree: ScenarioTree) -> SpaceTimeField:
    """h = pi - z where z feeds back into its own noise source.

    The feedback (div, beta_j (pi - z)) is taken explicitly from the previous
    level, so one forward sweep inverts I + B* exactly in the discrete sense.
    """
    _require_superparabolic(coeffs, "R*")
    sigma = coeffs.sigma

    def src(k, state):
        diff = pi.levels[k] - state
        return None, [dx_centered(grid, sigma[j] * diff) for j in range(tree.d)]

    z = _forward_march(coeffs, grid, tree, np.zeros((1, grid.nx)), src, space="X0")
    out = pi - z
    out.space = "X1"
    return out


def solve_L_star(xi: SpaceTimeField, coeffs, grid: Grid, tree: ScenarioTree) -> SpaceTimeField:
    """h with d h = [A* h + xi] dt - sum_j (div, beta_j h) domega_j."""
    _require_superparabolic(coeffs, "L*")
    sigma = coeffs.sigma

    def src(k, state):
        return xi.levels[k + 1], [
            -dx_centered(grid, sigma[j] * state) for j in range(tree.d)
        ]

    return _forward_march(coeffs, grid, tree, np.zeros((1, grid.nx)), src)


_BLOWUP_GUARD = 1e6


def solve_density(
    p0: np.ndarray,
    coeffs: CoefficientSet,
    grid: Grid,
    tree: ScenarioTree,
    validate: bool = True,
) -> DensitySolution:
    """Conditional density along every tree path.

    p0 must be a nonnegative grid function of unit mass.  The density is not
    clipped: small negative lobes of the scheme are reported through the
    positivity audit instead of being removed, since clipping would destroy
    the duality identities.
    """
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (grid.nx,):
        raise ForwardSolverError("p0 must be a grid function")
    if validate:
        _require_superparabolic(coeffs, "the density equation")
        if p0.min() < -1e-12:
            raise ForwardSolverError("p0 must be nonnegative")
        mass0 = grid.dx * float(p0[1:-1].sum())
        if abs(mass0 - 1.0) > 1e-8:
            raise ForwardSolverError(f"p0 must have unit mass, got {mass0:.6f}")
    sigma = coeffs.sigma
    mass, min_density = [], []

    def record(level, state):
        mass.append(grid.dx * state[:, 1:-1].sum(axis=1))
        min_density.append(float(state.min()))
        if np.abs(state).max() > _BLOWUP_GUARD:
            raise ForwardSolverError(f"density blow-up at level {level}")

    def src(k, state):
        return None, [-dx_centered(grid, sigma[j] * state) for j in range(tree.d)]

    start = np.zeros((1, grid.nx))
    start[0] = p0
    start[0, 0] = 0.0
    start[0, -1] = 0.0
    p = _forward_march(coeffs, grid, tree, start, src, on_level=record)
    peak = max(a.max() for a in p.levels)
    flagged = min(min_density) < -1e-3 * max(peak, 1e-300)
    return DensitySolution(p=p, mass=mass, min_density=min_density, flagged=flagged)
