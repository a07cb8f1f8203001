"""Spatial discretization of the state space.

Provides uniform 1-d grids on an interval (absorbing boundary) or on a wide
truncated line standing in for the whole real axis, the second-order
generator

    A u = f du/dx + (1/2) b d2u/dx2,        b = beta beta^T,

its discrete dual A* (built as the exact transpose of the interior matrix of
A in the dx-weighted inner product), and the spectral smoothing operator
Lambda = sqrt(I - Laplacian) realized in the Dirichlet sine basis.  Grid
functions are plain numpy arrays over the nodes; Dirichlet fields carry
zeros on the two boundary nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dst


class GridError(ValueError):
    """Raised for invalid domain/grid construction or mismatched grids."""


@dataclass(frozen=True)
class DomainSpec:
    """Spatial domain and time horizon of the cylinder D x (0, T).

    kind is "interval" for a genuine bounded domain with absorbing
    (Dirichlet) boundary, or "truncated_line" when the pair (a, b) is an
    artificial truncation of the whole line; the discretization treats both
    with a homogeneous Dirichlet condition.
    """

    kind: str
    a: float
    b: float
    horizon: float
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("interval", "truncated_line"):
            raise GridError(f"unknown domain kind {self.kind!r}")
        if not self.a < self.b:
            raise GridError(f"need a < b, got a={self.a}, b={self.b}")
        if not self.horizon > 0:
            raise GridError(f"need horizon > 0, got {self.horizon}")
        if self.dim != 1:
            raise GridError("only one spatial dimension is implemented")

    @property
    def absorbing(self) -> bool:
        """True when the boundary is a physical absorbing one."""
        return self.kind == "interval"


@dataclass(frozen=True)
class Grid:
    """Uniform grid over [a, b]; nodes 0 and nx-1 are boundary nodes."""

    domain: DomainSpec
    x: np.ndarray
    dx: float

    @property
    def nx(self) -> int:
        return self.x.size

    @property
    def ni(self) -> int:
        """Number of interior nodes."""
        return self.x.size - 2

    @property
    def x_interior(self) -> np.ndarray:
        return self.x[1:-1]


def build_grid(domain: DomainSpec, nx: int) -> Grid:
    """Build a uniform grid covering the domain.

    Parameters
    ----------
    domain : DomainSpec
    nx : int
        Node count including the two boundary nodes; at least 8.
    """
    if nx < 8:
        raise GridError(f"nx too small: need nx >= 8, got {nx}")
    x = np.linspace(domain.a, domain.b, nx)
    x.setflags(write=False)
    return Grid(domain=domain, x=x, dx=(domain.b - domain.a) / (nx - 1))


def _check_grid_function(grid: Grid, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != grid.nx:
        raise GridError(
            f"grid function has {u.shape[-1]} values, grid has {grid.nx} nodes"
        )
    if not np.all(np.isfinite(u)):
        raise GridError("grid function contains non-finite entries")
    return u


def generator_bands(grid: Grid, fvals, bvals):
    """Interior tridiagonal bands of A = f d/dx + (1/2) b d2/dx2.

    fvals and bvals broadcast against the interior nodes (last axis of
    length grid.ni).  Returns (lower, diag, upper) where lower[..., i]
    couples interior row i to i-1 and upper[..., i] couples it to i+1;
    the stray entries lower[..., 0] and upper[..., -1] are zeroed.
    """
    ni = grid.ni
    dx = grid.dx
    shape = np.broadcast_shapes(np.shape(fvals), np.shape(bvals), (ni,))
    f = np.broadcast_to(np.asarray(fvals, dtype=float), shape)
    b = np.broadcast_to(np.asarray(bvals, dtype=float), shape)
    adv = f / (2.0 * dx)
    dif = b / (2.0 * dx * dx)
    lower = (dif - adv).copy()
    upper = (dif + adv).copy()
    diag = -2.0 * dif
    lower[..., 0] = 0.0
    upper[..., -1] = 0.0
    return lower, diag, upper


def transpose_bands(lower, diag, upper):
    """Bands of the transposed tridiagonal matrix."""
    tl = np.zeros_like(lower)
    tu = np.zeros_like(upper)
    tl[..., 1:] = upper[..., :-1]
    tu[..., :-1] = lower[..., 1:]
    return tl, diag, tu


def apply_bands(lower, diag, upper, u):
    """Apply a tridiagonal matrix given by its bands to u (last axis)."""
    out = diag * u
    out[..., 1:] += lower[..., 1:] * u[..., :-1]
    out[..., :-1] += upper[..., :-1] * u[..., 1:]
    return out


def solve_tridiag(lower, diag, upper, rhs):
    """Solve batched tridiagonal systems by the Thomas algorithm.

    All arguments broadcast against each other except along the last axis,
    which is the system dimension.  No pivoting: callers must supply
    diagonally dominant systems (true for I - theta*dt*A under the
    coefficient bounds enforced by validation).
    """
    n = rhs.shape[-1]
    band_shape = np.broadcast_shapes(lower.shape, diag.shape, upper.shape)
    out_shape = np.broadcast_shapes(band_shape, rhs.shape)
    cp = np.empty(band_shape, dtype=float)
    x = np.empty(out_shape, dtype=float)
    inv = 1.0 / diag[..., 0]
    cp[..., 0] = upper[..., 0] * inv
    x[..., 0] = rhs[..., 0] * inv
    for i in range(1, n):
        denom = 1.0 / (diag[..., i] - lower[..., i] * cp[..., i - 1])
        cp[..., i] = upper[..., i] * denom
        x[..., i] = (rhs[..., i] - lower[..., i] * x[..., i - 1]) * denom
    for i in range(n - 2, -1, -1):
        x[..., i] -= cp[..., i] * x[..., i + 1]
    return x


def thomas_rows(L, D, U, X):
    """Thomas algorithm in rows layout: system axis first and contiguous.

    L, D, U broadcastable to (n, nb); X is (n, nb, m) and is overwritten
    with the solution.  The values of L[0] and U[n-1] never influence the
    solution, so callers may pass broadcast views with arbitrary entries
    there.  Same dominance requirement as solve_tridiag.
    """
    n = X.shape[0]
    cp = np.empty((n,) + np.broadcast_shapes(L.shape[1:], D.shape[1:], U.shape[1:]))
    inv = 1.0 / D[0]
    cp[0] = U[0] * inv
    X[0] *= inv[:, None]
    for i in range(1, n):
        denom = 1.0 / (D[i] - L[i] * cp[i - 1])
        cp[i] = U[i] * denom
        X[i] -= L[i][:, None] * X[i - 1]
        X[i] *= denom[:, None]
    for i in range(n - 2, -1, -1):
        X[i] -= cp[i][:, None] * X[i + 1]
    return X


def apply_A(coeffs, u, t, node, grid: Grid, tree) -> np.ndarray:
    """Apply the generator at time t and tree node by centered differences.

    Interior nodes get f u' + (1/2) b u'' using the stored values of u
    (including its boundary entries); boundary rows are zero.
    """
    u = _check_grid_function(grid, u)
    f, b = coeffs.drift_and_b(grid.x_interior, t, tree.omega1(node))
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(b))):
        raise GridError("coefficient evaluation returned non-finite values")
    out = np.zeros_like(u)
    dx = grid.dx
    du = (u[2:] - u[:-2]) / (2.0 * dx)
    d2u = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (dx * dx)
    out[1:-1] = f * du + 0.5 * b * d2u
    return out


def apply_A_star(coeffs, u, t, node, grid: Grid, tree) -> np.ndarray:
    """Apply the dual generator: the exact transpose of the interior matrix
    of apply_A in the dx-weighted inner product."""
    u = _check_grid_function(grid, u)
    f, b = coeffs.drift_and_b(grid.x_interior, t, tree.omega1(node))
    lo, dg, up = generator_bands(grid, f, b)
    out = np.zeros_like(u)
    out[1:-1] = apply_bands(*transpose_bands(lo, dg, up), u[1:-1])
    return out


class LambdaTransform:
    """Spectral realization of Lambda = sqrt(I - Laplacian) on a grid.

    Uses the orthonormal type-I discrete sine transform, which diagonalizes
    the Dirichlet Laplacian; eigenvalues of -Laplacian are
    (2/dx^2) (1 - cos(m pi / (ni + 1))).
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        m = np.arange(1, grid.ni + 1)
        self.eigenvalues = (2.0 / grid.dx**2) * (1.0 - np.cos(m * np.pi / (grid.ni + 1)))
        self.eigenvalues.setflags(write=False)

    def apply(self, u: np.ndarray, k: int) -> np.ndarray:
        """Lambda^k u for k in {-1, 0, 1}; u may be batched on leading axes."""
        if k not in (-1, 0, 1):
            raise GridError(f"Lambda power must be -1, 0 or 1, got {k}")
        u = _check_grid_function(self.grid, u)
        if k == 0:
            return u.copy()
        coef = dst(u[..., 1:-1], type=1, norm="ortho", axis=-1)
        coef *= (1.0 + self.eigenvalues) ** (0.5 * k)
        out = np.zeros_like(u)
        out[..., 1:-1] = dst(coef, type=1, norm="ortho", axis=-1)
        return out


def lambda_pow(u: np.ndarray, k: int, grid: Grid) -> np.ndarray:
    """Convenience wrapper around LambdaTransform.apply."""
    return LambdaTransform(grid).apply(u, k)


def h0_inner(u: np.ndarray, v: np.ndarray, grid: Grid) -> float:
    """Discrete L2(D) inner product, dx-weighted over the nodes."""
    return float(grid.dx * np.dot(np.asarray(u), np.asarray(v)))


def h0_norm(u: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(grid.dx) * np.linalg.norm(np.asarray(u)))


def hk_norm(u: np.ndarray, k: int, grid: Grid) -> float:
    """H^k norm, k in {-1, 0, 1}, via the Lambda spectral scaling."""
    if k == 0:
        return h0_norm(u, grid)
    return h0_norm(lambda_pow(u, k, grid), grid)


def dx_centered(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Centered first derivative; boundary rows zero; u may be batched."""
    out = np.zeros_like(u)
    out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * grid.dx)
    return out


def dx_centered_onesided(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Like dx_centered but with second-order one-sided stencils at the
    first and last interior nodes (does not touch the boundary values)."""
    out = dx_centered(grid, u)
    h2 = 2.0 * grid.dx
    out[..., 1] = (-3.0 * u[..., 1] + 4.0 * u[..., 2] - u[..., 3]) / h2
    out[..., -2] = (3.0 * u[..., -2] - 4.0 * u[..., -3] + u[..., -4]) / h2
    return out
