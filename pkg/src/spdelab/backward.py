"""Backward parabolic solvers and the operator calculus built on them.

The pathwise solver marches the terminal-value problem

    dU/dt + A U = -g,   U(.,T) = 0,   U = 0 on the lateral boundary,

down a single tree path with an implicit theta scheme.  The tree operators
never enumerate leaves: conditional expectations obey the recursion

    v^k(n) = S_k(n) [ mean_children v^{k+1} + dt g^k(n) ],
    S_k(n) = (I - theta dt A(t_k, n))^{-1},

and the diffusion kernels of the martingale representation fall out of the
same sweep from the child spread,

    X_j^k(n) = S_k(n) E[ y^{k+1} domega_j | n ] / dt,

with y^{k+1} the explicit part of the step (y = v^{k+1} for theta = 1).
The fixed-point solver inverts I + B matrix-free with damped iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet
from .domain import (
    Grid,
    apply_bands,
    dx_centered_onesided,
    generator_bands,
    solve_tridiag,
    thomas_rows,
)
from .fields import SpaceTimeField, norm_x0
from .tree import ScenarioTree


class ConvergenceError(RuntimeError):
    """Fixed-point iteration failed to reach the requested residual."""

    def __init__(self, message, iterations, residual):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass
class BackwardSolution:
    """Adapted pair (v, X) solving the backward problem, plus diagnostics."""

    v: SpaceTimeField
    kernels: list
    info: dict = field(default_factory=dict)


def rows_bands(coeffs, grid, tree, level, theta_dt, dual=False):
    """Bands of I - theta_dt*A (or its transpose) in rows layout (ni, n_nodes).

    When the drift is x-independent the bands are constant along the system
    axis and come back as zero-copy broadcast views; thomas_rows never reads
    the L[0] / U[-1] corner entries, so no edge zeroing is needed here.
    """
    ni = grid.ni
    adv = np.asarray(coeffs.drift_nodes(grid, tree, level)) / (2.0 * grid.dx)
    dif = coeffs.b_total / (2.0 * grid.dx**2)
    lo = -theta_dt * (dif - adv)
    up = -theta_dt * (dif + adv)
    n = lo.shape[0]
    D = np.broadcast_to(np.float64(1.0 + 2.0 * theta_dt * dif), (ni, n))
    if lo.shape[1] == 1:
        l0, u0 = lo[:, 0], up[:, 0]
        if dual:
            l0, u0 = u0, l0
        return np.broadcast_to(l0, (ni, n)), D, np.broadcast_to(u0, (ni, n))
    if dual:
        L = np.empty((ni, n))
        U = np.empty((ni, n))
        L[1:] = up[:, :-1].T
        L[0] = 0.0
        U[:-1] = lo[:, 1:].T
        U[-1] = 0.0
        return L, D, U
    return np.ascontiguousarray(lo.T), D, np.ascontiguousarray(up.T)


def _solve_rows(lo, dg, up, rhs_interior):
    """Solve implicit systems given rows-layout bands (ni, n_nodes).

    rhs_interior is node-major, (n_nodes, ni) or (n_nodes, m, ni); the
    solution comes back in the same layout.
    """
    moved = np.ascontiguousarray(np.moveaxis(rhs_interior, -1, 0))
    flat = moved if moved.ndim == 3 else moved[:, :, None]
    thomas_rows(lo, dg, up, flat)
    return np.moveaxis(flat.reshape(moved.shape), 0, -1)


def _explicit_apply(coeffs, grid, tree, level, values):
    """A(t_level, node) applied to per-node values (interior part)."""
    f = coeffs.drift_nodes(grid, tree, level)
    lo, dg, up = generator_bands(grid, f, coeffs.b_total)
    out = np.zeros_like(values)
    out[:, 1:-1] = apply_bands(lo, dg, up, values[:, 1:-1])
    return out


def _embed(grid, interior):
    out = np.zeros(interior.shape[:-1] + (grid.nx,))
    out[..., 1:-1] = interior
    return out


def backward_sweep(
    g: SpaceTimeField,
    coeffs: CoefficientSet,
    grid: Grid,
    tree: ScenarioTree,
    theta: float = 1.0,
    want_v: bool = True,
    want_kernels: bool = False,
    want_bg: bool = False,
):
    """One backward pass over the tree; returns dict with the requested
    fields among "v", "kernels", "bg".  Shared engine behind op_T / op_G /
    op_B so a fixed-point iteration costs exactly one sweep."""
    N, br, d, dt = tree.n_steps, tree.branching, tree.d, tree.dt
    nx = grid.nx
    out = {}
    if want_v:
        out["v"] = [None] * (N + 1)
        out["v"][N] = np.zeros((tree.n_nodes(N), nx))
    if want_kernels:
        out["kernels"] = [[None] * (N + 1) for _ in range(d)]
        for j in range(d):
            out["kernels"][j][N] = np.zeros((tree.n_nodes(N), nx))
    if want_bg:
        out["bg"] = [None] * (N + 1)
        out["bg"][N] = np.zeros((tree.n_nodes(N), nx))
    sigma = coeffs.sigma
    vnext = np.zeros((tree.n_nodes(N), nx))
    for k in range(N - 1, -1, -1):
        n_k = tree.n_nodes(k)
        if theta != 1.0:
            y = vnext + dt * (1.0 - theta) * _explicit_apply(coeffs, grid, tree, k + 1, vnext)
        else:
            y = vnext
        resh = y.reshape(n_k, br, nx)
        rhs0 = resh.mean(axis=1) + dt * g.levels[k]
        lo, dg, up = rows_bands(coeffs, grid, tree, k, theta * dt)
        if want_kernels or want_bg:
            w = np.einsum("nbx,bj->njx", resh, tree.digit_signs) / (br * tree.sqdt)
            rhs = np.concatenate([rhs0[:, None, :], w], axis=1)
            sol = _solve_rows(lo, dg, up, rhs[..., 1:-1])
            vk = _embed(grid, sol[:, 0])
            kern = [_embed(grid, sol[:, 1 + j]) for j in range(d)]
            if want_kernels:
                for j in range(d):
                    out["kernels"][j][k] = kern[j]
            if want_bg:
                bg = np.zeros((n_k, nx))
                for j in range(d):
                    bg -= sigma[j] * dx_centered_onesided(grid, kern[j])
                bg[:, 0] = 0.0
                bg[:, -1] = 0.0
                out["bg"][k] = bg
        else:
            vk = _embed(grid, _solve_rows(lo, dg, up, rhs0[:, 1:-1]))
        if want_v:
            out["v"][k] = vk
        vnext = vk
    result = {}
    if want_v:
        result["v"] = SpaceTimeField(grid, tree, out["v"], space="X1")
    if want_kernels:
        result["kernels"] = [
            SpaceTimeField(grid, tree, out["kernels"][j], space="X1") for j in range(d)
        ]
    if want_bg:
        result["bg"] = SpaceTimeField(grid, tree, out["bg"], space="X0")
    return result


def solve_backward_pathwise(
    g: SpaceTimeField,
    coeffs: CoefficientSet,
    leaf_path,
    grid: Grid,
    tree: ScenarioTree,
    theta: float = 1.0,
) -> np.ndarray:
    """March the terminal-value problem down one leaf path.

    Returns U of shape (n_steps + 1, nx) with U[N] = 0 and zero boundary
    columns.  Serves as the leaf-enumeration oracle for the tree operators.
    """
    path = np.asarray(leaf_path)
    if path.ndim == 0:
        path = tree.leaf_path(int(path))
    if path.shape != (tree.n_steps + 1,):
        raise ValueError("leaf_path must be a leaf index or a per-level node sequence")
    N, dt = tree.n_steps, tree.dt
    U = np.zeros((N + 1, grid.nx))
    for k in range(N - 1, -1, -1):
        w1_new = tree.omega[k + 1][path[k + 1], 0]
        f_new = coeffs.drift(grid.x_interior, (k + 1) * dt, w1_new)
        rhs = U[k + 1].copy()
        if theta != 1.0:
            lo, dg, up = generator_bands(grid, f_new, coeffs.b_total)
            rhs[1:-1] += dt * (1.0 - theta) * apply_bands(lo, dg, up, U[k + 1][1:-1])
        rhs += dt * g.levels[k][path[k]]
        w1 = tree.omega[k][path[k], 0]
        f = coeffs.drift(grid.x_interior, k * dt, w1)
        lo, dg, up = generator_bands(grid, f, coeffs.b_total)
        U[k, 1:-1] = solve_tridiag(
            -theta * dt * lo, 1.0 - theta * dt * dg, -theta * dt * up, rhs[1:-1]
        )
    return U


def op_T(g, coeffs, grid, tree, theta: float = 1.0) -> SpaceTimeField:
    """v = E{ U(., t) | F_t } for the pathwise solutions U; the level-k
    slice holds the conditional expectation at each level-k node."""
    return backward_sweep(g, coeffs, grid, tree, theta, want_v=True)["v"]


def op_G(g, coeffs, grid, tree, theta: float = 1.0) -> list:
    """Diffusion kernels X_j: the martingale-representation kernels of
    U(x, t, .) on the diagonal, one adapted field per driving component."""
    return backward_sweep(
        g, coeffs, grid, tree, theta, want_v=False, want_kernels=True
    )["kernels"]


def op_B(g, coeffs, grid, tree, theta: float = 1.0) -> SpaceTimeField:
    """B g = - sum_j beta_j dX_j/dx with centered differences (one-sided at
    the first interior nodes); boundary rows zero."""
    return backward_sweep(g, coeffs, grid, tree, theta, want_v=False, want_bg=True)["bg"]


def solve_R(
    phi: SpaceTimeField,
    coeffs: CoefficientSet,
    grid: Grid,
    tree: ScenarioTree,
    tol: float = 1e-8,
    max_iter: int = 200,
    damping: float = 0.8,
    x0: SpaceTimeField | None = None,
    theta: float = 1.0,
):
    """Solve (I + B) g = phi by damped fixed-point iteration.

    Returns (g, info) where info reports the iteration count and residual
    history (X0 norms of (I+B)g - phi).  Raises ConvergenceError when the
    residual does not fall below tol * ||phi|| within max_iter sweeps: the
    contraction budget of the Neumann series is exceeded and the caller
    should shrink the drift scale or the horizon.
    """
    phi_norm = norm_x0(phi)
    if phi_norm == 0.0:
        return SpaceTimeField.zeros(grid, tree), {
            "iterations": 0,
            "residual": 0.0,
            "residual_history": [],
        }
    g = phi.copy() if x0 is None else x0.copy()
    history = []
    for it in range(1, max_iter + 1):
        bg = backward_sweep(g, coeffs, grid, tree, theta, want_v=False, want_bg=True)["bg"]
        r = g + bg - phi
        rn = norm_x0(r)
        history.append(rn)
        if rn <= tol * phi_norm:
            return g, {"iterations": it, "residual": rn, "residual_history": history}
        g = g - damping * r
    raise ConvergenceError(
        f"(I+B) fixed point did not reach tol={tol:g} in {max_iter} iterations "
        f"(last residual {history[-1]:.3e}); reduce the drift scale or the horizon",
        iterations=max_iter,
        residual=history[-1],
    )


def op_L(
    phi: SpaceTimeField,
    coeffs: CoefficientSet,
    grid: Grid,
    tree: ScenarioTree,
    tol: float = 1e-8,
    max_iter: int = 200,
    damping: float = 0.8,
    theta: float = 1.0,
) -> BackwardSolution:
    """L phi = T R phi: the generalized solution pair (v, X) representing
    the conditional functional with integrand phi."""
    g, info = solve_R(phi, coeffs, grid, tree, tol, max_iter, damping, theta=theta)
    res = backward_sweep(g, coeffs, grid, tree, theta, want_v=True, want_kernels=True)
    info = dict(info)
    return BackwardSolution(v=res["v"], kernels=res["kernels"], info=info)


def residual_bspde(
    sol: BackwardSolution,
    g: SpaceTimeField,
    coeffs: CoefficientSet,
    grid: Grid,
    tree: ScenarioTree,
) -> float:
    """X0 norm of the discrete residual of the integrated backward relation

        v(t) = int_t^T [A v + g] - int_t^T X domega,

    evaluated per leaf with a trapezoidal rule in the drift integral and the
    Ito (left-point) rule in the stochastic sum.
    """
    N, dt, d = tree.n_steps, tree.dt, tree.d
    leaves = np.arange(tree.n_leaves)
    drift_acc = np.zeros((tree.n_leaves, grid.nx))
    noise_acc = np.zeros((tree.n_leaves, grid.nx))

    def drift_term(k):
        av = _explicit_apply(coeffs, grid, tree, k, sol.v.levels[k]) + g.levels[k]
        return av[tree.ancestor_index(leaves, k)]

    total = 0.0
    d_hi = drift_term(N)
    for k in range(N - 1, -1, -1):
        d_lo = drift_term(k)
        drift_acc += 0.5 * dt * (d_lo + d_hi)
        d_hi = d_lo
        digits = (leaves >> (d * (N - k - 1))) % tree.branching
        kick = tree.digit_signs[digits] * tree.sqdt  # (n_leaves, d)
        for j in range(d):
            noise_acc += sol.kernels[j].levels[k][tree.ancestor_index(leaves, k)] * kick[:, j : j + 1]
        r = sol.v.levels[k][tree.ancestor_index(leaves, k)] - drift_acc + noise_acc
        total += dt * grid.dx * float(np.einsum("lx,lx->", r, r)) / tree.n_leaves
    return float(np.sqrt(total))
