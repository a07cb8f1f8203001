"""Grid x time x tree-node tensors and their inner products.

A SpaceTimeField stores one array per time level, indexed by that level's
tree nodes (adaptedness is structural).  The X0 inner product discretizes
the time integral with the left rule over the n_steps cells,

    <F, G> = dt * sum_k  E_nodes  <F^k, G^k>_{H0},     k = 0 .. n_steps-1,

and `pair_x0_dual` pairs a backward-type field with a forward-marched one
cell by cell (slice k against slice k+1), which aligns the two one-sided
quadratures of the same time integral.
"""

from __future__ import annotations

import numpy as np
from scipy.fft import dst

from .domain import Grid, LambdaTransform
from .tree import ScenarioTree


class FieldError(ValueError):
    """Raised on mismatched grids/trees or mis-shaped level data."""


class SpaceTimeField:
    """Adapted space-time random field on a grid and scenario tree.

    levels[k] has shape (2**(d k), nx); Dirichlet fields carry zeros in the
    first and last column.  `space` is an informational regularity tag
    ("X-1", "X0", "X1").
    """

    __slots__ = ("grid", "tree", "levels", "space")

    def __init__(self, grid: Grid, tree: ScenarioTree, levels, space: str = "X0"):
        if len(levels) != tree.n_steps + 1:
            raise FieldError(
                f"need {tree.n_steps + 1} level slices, got {len(levels)}"
            )
        self.grid = grid
        self.tree = tree
        self.levels = [np.asarray(a, dtype=float) for a in levels]
        self.space = space
        for k, a in enumerate(self.levels):
            if a.shape != (tree.n_nodes(k), grid.nx):
                raise FieldError(
                    f"level {k} slice has shape {a.shape}, expected "
                    f"{(tree.n_nodes(k), grid.nx)}"
                )

    @classmethod
    def zeros(cls, grid: Grid, tree: ScenarioTree, space: str = "X0") -> "SpaceTimeField":
        return cls(
            grid,
            tree,
            [np.zeros((tree.n_nodes(k), grid.nx)) for k in range(tree.n_steps + 1)],
            space=space,
        )

    @classmethod
    def from_function(
        cls, grid: Grid, tree: ScenarioTree, fn, space: str = "X0"
    ) -> "SpaceTimeField":
        """Evaluate fn(x_row, t, w1_column) on every level; fn must broadcast."""
        levels = []
        for k in range(tree.n_steps + 1):
            w1 = tree.omega[k][:, :1]
            vals = np.broadcast_to(
                fn(grid.x[None, :], k * tree.dt, w1), (tree.n_nodes(k), grid.nx)
            )
            levels.append(np.array(vals, dtype=float))
        return cls(grid, tree, levels, space=space)

    def copy(self) -> "SpaceTimeField":
        return SpaceTimeField(
            self.grid, self.tree, [a.copy() for a in self.levels], space=self.space
        )

    def leaf_values(self, level: int) -> np.ndarray:
        """Level slice lifted to the leaves, shape (n_leaves, nx)."""
        idx = self.tree.ancestor_index(np.arange(self.tree.n_leaves), level)
        return self.levels[level][idx]

    def max_abs(self) -> float:
        return max(float(np.abs(a).max()) for a in self.levels)

    # arithmetic ---------------------------------------------------------

    def _binary(self, other, op):
        if isinstance(other, SpaceTimeField):
            _check_compatible(self, other)
            return SpaceTimeField(
                self.grid,
                self.tree,
                [op(a, b) for a, b in zip(self.levels, other.levels)],
                space=self.space,
            )
        return NotImplemented

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        return SpaceTimeField(
            self.grid, self.tree, [c * a for a in self.levels], space=self.space
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)


def _check_compatible(F: SpaceTimeField, G: SpaceTimeField):
    if F.grid is not G.grid and F.grid.nx != G.grid.nx:
        raise FieldError("fields live on different grids")
    if F.tree is not G.tree and (
        F.tree.n_steps != G.tree.n_steps or F.tree.d != G.tree.d
    ):
        raise FieldError("fields live on different trees")


def inner_x0(F: SpaceTimeField, G: SpaceTimeField) -> float:
    """Discrete X0 inner product (left-rule time quadrature)."""
    _check_compatible(F, G)
    tree, grid = F.tree, F.grid
    total = 0.0
    for k in range(tree.n_steps):
        total += float(np.einsum("nx,nx->", F.levels[k], G.levels[k])) / tree.n_nodes(k)
    return total * tree.dt * grid.dx


def pair_x0_dual(F: SpaceTimeField, P: SpaceTimeField) -> float:
    """Duality pairing of a backward-type field with a forward-marched one.

    Cell k pairs the level-k slice of F (value at the left edge) with the
    level-(k+1) slice of P (value carried to the right edge), expanding F
    onto the children nodes.
    """
    _check_compatible(F, P)
    tree, grid = F.tree, F.grid
    br = tree.branching
    total = 0.0
    for k in range(tree.n_steps):
        child = P.levels[k + 1].reshape(tree.n_nodes(k), br, grid.nx)
        total += float(np.einsum("nx,nbx->", F.levels[k], child)) / tree.n_nodes(k + 1)
    return total * tree.dt * grid.dx


def norm_x0(F: SpaceTimeField) -> float:
    return float(np.sqrt(max(inner_x0(F, F), 0.0)))


def _lambda_scale_sq(grid: Grid, k: int) -> np.ndarray:
    lam = LambdaTransform(grid).eigenvalues
    return (1.0 + lam) ** k


def norm_xk(F: SpaceTimeField, k: int) -> float:
    """X^k norm for k in {-1, 0, 1} via the sine-spectral Lambda scaling."""
    if k == 0:
        return norm_x0(F)
    scale = _lambda_scale_sq(F.grid, k)
    tree, grid = F.tree, F.grid
    total = 0.0
    for lev in range(tree.n_steps):
        coef = dst(F.levels[lev][:, 1:-1], type=1, norm="ortho", axis=-1)
        total += float(np.einsum("nm,m->", coef**2, scale)) / tree.n_nodes(lev)
    return float(np.sqrt(total * tree.dt * grid.dx))


def norm_c0(F: SpaceTimeField) -> float:
    """C0-type norm: max over time of the mean-square H0 norm."""
    tree, grid = F.tree, F.grid
    worst = 0.0
    for k in range(tree.n_steps + 1):
        msq = float(np.einsum("nx,nx->", F.levels[k], F.levels[k])) / tree.n_nodes(k)
        worst = max(worst, msq * grid.dx)
    return float(np.sqrt(worst))


def check_adapted_prefix(F: SpaceTimeField) -> bool:
    """Structural adaptedness always holds; kept as an explicit probe used
    by tests: values at a node must not depend on how the slice is reached
    from descendant leaves."""
    tree = F.tree
    for k in range(tree.n_steps + 1):
        lifted = F.leaf_values(k)
        back = lifted[:: tree.branching ** (tree.n_steps - k)]
        if not np.array_equal(back, F.levels[k]):
            return False
    return True


def smooth_random_field(
    grid: Grid,
    tree: ScenarioTree,
    seed: int,
    n_modes: int = 4,
    noise_weight: float = 1.0,
    space: str = "X0",
) -> SpaceTimeField:
    """Seeded random test field: smooth sine profile in x, adapted in time.

    Each mode carries a constant part, a bounded function of the Brownian
    state (genuinely random across nodes, scaled by noise_weight) and a slow
    deterministic ramp, so the field is Dirichlet-compatible, smooth in x
    and adapted.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    amp = rng.normal(size=(3, n_modes)) / np.arange(1, n_modes + 1)
    amp[1] *= noise_weight
    z = (grid.x - grid.domain.a) / (grid.domain.b - grid.domain.a)
    modes = np.sin(np.outer(np.arange(1, n_modes + 1), np.pi * z))  # (m, nx)
    horizon = tree.horizon
    levels = []
    for k in range(tree.n_steps + 1):
        w1 = tree.omega[k][:, :1]
        ramp = (k * tree.dt) / horizon
        weights = amp[0][None, :] + amp[1][None, :] * np.tanh(w1) + amp[2][None, :] * ramp
        levels.append(weights @ modes)
    return SpaceTimeField(grid, tree, levels, space=space)


def smooth_profile_field(
    grid: Grid,
    tree: ScenarioTree,
    seed: int,
    n_modes: int = 4,
    space: str = "X0",
) -> SpaceTimeField:
    """Seeded random space-time profile, constant across tree nodes.

    Built from sine modes with randomly drawn polynomial-in-time weights.
    Being independent of the driving noise, such fields isolate the scheme
    discrepancies of duality pairings from Ito covariation effects (pairing
    a noise-built forward solution against a noise-correlated test field
    picks up their quadratic covariation, which no refinement removes).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    amp = rng.normal(size=(3, n_modes)) / np.arange(1, n_modes + 1)
    z = (grid.x - grid.domain.a) / (grid.domain.b - grid.domain.a)
    modes = np.sin(np.outer(np.arange(1, n_modes + 1), np.pi * z))
    horizon = tree.horizon
    levels = []
    for k in range(tree.n_steps + 1):
        s = (k * tree.dt) / horizon
        weights = amp[0] + amp[1] * s + amp[2] * (s * s - s)
        profile = weights @ modes
        levels.append(np.broadcast_to(profile, (tree.n_nodes(k), grid.nx)).copy())
    return SpaceTimeField(grid, tree, levels, space=space)
