"""Discrete model of the driving Wiener process.

The first d components of the Wiener process live on a complete binomial
scenario tree with increments +-sqrt(dt) per component and step.  On this
tree conditional expectation, the Ito integral and the martingale
(Clark-type) representation are computed exactly, so probabilistic
identities hold to round-off and discretization error is confined to space
and time.  Fine-time Monte Carlo paths are produced as Brownian bridges
threaded through a designated leaf path, with the remaining d0 - d Wiener
components left free.

Node addressing: the node with index i at level k has parent i // 2**d and
reaches child i * 2**d + j through branch digit j; bit c of the digit
encodes the sign of increment component c (bit 0 -> +sqrt(dt)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

MAX_STEPS = {1: 16, 2: 8}


class TreeError(ValueError):
    """Raised for invalid tree construction or mis-shaped tree data."""


def seed_entropy(seed, *extra) -> tuple:
    """Canonical entropy tuple for a seed that may itself be a tuple.

    This is the documented splitting rule: derived streams append fixed
    integer tags to the user seed, so chunked estimators are reproducible
    and independent of worker count.
    """
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed) + tuple(extra)
    return (int(seed),) + tuple(extra)


class TreeNode(NamedTuple):
    level: int
    index: int


@dataclass(frozen=True)
class ScenarioTree:
    d: int
    n_steps: int
    horizon: float
    dt: float
    sqdt: float
    digit_signs: np.ndarray  # (2**d, d), entries +-1
    omega: tuple  # per level k: (2**(d k), d) cumulative Wiener state

    @property
    def branching(self) -> int:
        return 2**self.d

    @property
    def n_leaves(self) -> int:
        return self.branching**self.n_steps

    def n_nodes(self, level: int) -> int:
        return self.branching**level

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def node_probability(self, level: int) -> float:
        return 1.0 / self.n_nodes(level)

    def parent(self, node: TreeNode) -> TreeNode:
        if node.level == 0:
            raise TreeError("root has no parent")
        return TreeNode(node.level - 1, node.index // self.branching)

    def children(self, node: TreeNode) -> list[TreeNode]:
        base = node.index * self.branching
        return [TreeNode(node.level + 1, base + j) for j in range(self.branching)]

    def edge_increment(self, node: TreeNode) -> np.ndarray:
        """Increment vector on the edge entering the node from its parent."""
        if node.level == 0:
            raise TreeError("root has no incoming edge")
        return self.digit_signs[node.index % self.branching] * self.sqdt

    def omega1(self, node: TreeNode) -> float:
        """First Wiener component at the node."""
        return float(self.omega[node.level][node.index, 0])

    def ancestor_index(self, leaf_index, level: int):
        """Index of the level-`level` ancestor of the given leaf (vectorized)."""
        shift = self.d * (self.n_steps - level)
        return np.asarray(leaf_index) >> shift

    def leaf_path(self, leaf_index: int) -> np.ndarray:
        """Node indices along the path root -> leaf, one per level."""
        if not 0 <= leaf_index < self.n_leaves:
            raise TreeError(f"leaf index {leaf_index} out of range")
        return np.array(
            [leaf_index >> (self.d * (self.n_steps - k)) for k in range(self.n_steps + 1)],
            dtype=np.int64,
        )

    def path_increments(self, path: np.ndarray) -> np.ndarray:
        """Edge increments (n_steps, d) along a path of node indices."""
        digits = path[1:] % self.branching
        return self.digit_signs[digits] * self.sqdt


def build_tree(d: int, n_steps: int, horizon: float) -> ScenarioTree:
    """Build the complete binomial scenario tree.

    Guards: d in {1, 2}; n_steps <= 16 for d=1 and <= 8 for d=2 (node count
    is (2**d)**n_steps).
    """
    if d not in MAX_STEPS:
        raise TreeError(f"driving dimension d must be 1 or 2, got {d}")
    if n_steps < 1:
        raise TreeError("n_steps must be positive")
    if n_steps > MAX_STEPS[d]:
        raise TreeError(
            f"n_steps={n_steps} exceeds the size guard {MAX_STEPS[d]} for d={d}"
        )
    if horizon <= 0:
        raise TreeError("horizon must be positive")
    dt = horizon / n_steps
    sqdt = float(np.sqrt(dt))
    br = 2**d
    digits = np.arange(br)
    digit_signs = np.empty((br, d))
    for c in range(d):
        digit_signs[:, c] = 1.0 - 2.0 * ((digits >> c) & 1)
    digit_signs.setflags(write=False)
    omega = [np.zeros((1, d))]
    for _ in range(n_steps):
        prev = omega[-1]
        nxt = prev[:, None, :] + digit_signs[None, :, :] * sqdt
        omega.append(nxt.reshape(-1, d))
    for arr in omega:
        arr.setflags(write=False)
    return ScenarioTree(
        d=d,
        n_steps=n_steps,
        horizon=horizon,
        dt=dt,
        sqdt=sqdt,
        digit_signs=digit_signs,
        omega=tuple(omega),
    )


def _as_leaf_values(tree: ScenarioTree, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[0] != tree.n_leaves:
        raise TreeError(
            f"leaf-indexed input has {X.shape[0]} entries, tree has {tree.n_leaves} leaves"
        )
    return X


def cond_expect(X, t_index: int, tree: ScenarioTree) -> np.ndarray:
    """Conditional expectation of leaf-indexed values at a tree level.

    Exact probability-weighted average over descendant leaves; the tower
    property holds to round-off by construction.
    """
    if not 0 <= t_index <= tree.n_steps:
        raise TreeError(f"t_index {t_index} out of range [0, {tree.n_steps}]")
    vals = _as_leaf_values(tree, X)
    rest = vals.shape[1:]
    for _ in range(tree.n_steps - t_index):
        vals = vals.reshape((-1, tree.branching) + rest).mean(axis=1)
    return vals


def ito_integral(gammas: Sequence[np.ndarray], tree: ScenarioTree) -> np.ndarray:
    """Ito sum of an adapted integrand over the whole horizon, per leaf.

    gammas[k] holds the d-row integrand values on level-k nodes, shape
    (2**(d k), d), for k = 0 .. n_steps-1.
    """
    if len(gammas) != tree.n_steps:
        raise TreeError(f"need {tree.n_steps} integrand levels, got {len(gammas)}")
    acc = np.zeros(1)
    kick = tree.digit_signs.T * tree.sqdt  # (d, branching)
    for k, gam in enumerate(gammas):
        gam = np.asarray(gam, dtype=float)
        if gam.shape != (tree.n_nodes(k), tree.d):
            raise TreeError(
                f"integrand at level {k} has shape {gam.shape}, "
                f"expected {(tree.n_nodes(k), tree.d)} (non-adapted input?)"
            )
        acc = (acc[:, None] + gam @ kick).reshape(-1)
    return acc


@dataclass(frozen=True)
class MartingaleDecomposition:
    """Mean plus Clark kernels of a leaf-indexed variable.

    For d=1 the reconstruction mean + sum_j int gamma_j domega_j reproduces
    the variable exactly; for d=2 the kernels are the L2 projections onto
    the increment directions (the exact analog only exists in the limit).
    """

    mean: float
    kernels: tuple  # per level k: (2**(d k), d)

    def reconstruct(self, tree: ScenarioTree) -> np.ndarray:
        return self.mean + ito_integral(list(self.kernels), tree)


def clark_decompose(X, tree: ScenarioTree) -> MartingaleDecomposition:
    """Martingale representation of a leaf-indexed variable.

    kernel_j at a node is E[X domega_j | node] / dt, solved exactly from the
    child conditional means.
    """
    vals = _as_leaf_values(tree, X)
    if vals.ndim != 1:
        raise TreeError("clark_decompose expects scalar leaf values")
    kernels: list[np.ndarray] = [None] * tree.n_steps
    weights = tree.digit_signs * (tree.sqdt / (tree.dt * tree.branching))
    m = vals
    for k in range(tree.n_steps - 1, -1, -1):
        m_children = m.reshape(-1, tree.branching)
        kernels[k] = m_children @ weights
        m = m_children.mean(axis=1)
    return MartingaleDecomposition(mean=float(m[0]), kernels=tuple(kernels))


@dataclass
class PathBundle:
    """Fine-time Wiener increments for Monte Carlo, optionally constrained.

    The first `d_constrained` components are Brownian bridges matching a
    tree path's increments at the coarse times; the rest are free.  When
    `leaf_path` is an array of per-realization leaf indices the bundle
    samples the tree and the bridge constraint varies per path.
    """

    tree: ScenarioTree | None
    leaf_path: np.ndarray | None  # node indices per level, or (M,) leaf draws
    d_constrained: int
    d0: int
    dt_mc: float
    seed: int
    times: np.ndarray  # (n_fine + 1,)
    increments: np.ndarray  # (M, d0, n_fine)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_fine(self) -> int:
        return self.increments.shape[2]

    def paths(self) -> np.ndarray:
        """Cumulative Wiener values, shape (M, d0, n_fine + 1)."""
        out = np.zeros((self.n_paths, self.d0, self.n_fine + 1))
        np.cumsum(self.increments, axis=2, out=out[:, :, 1:])
        return out


_BUNDLE_GUARD = 6 * 10**7


def _fine_steps(horizon: float, dt_mc: float, dt_coarse: float | None) -> tuple[int, int]:
    n_fine = horizon / dt_mc
    if abs(n_fine - round(n_fine)) > 1e-9:
        raise TreeError(f"dt_mc={dt_mc} does not divide the horizon {horizon}")
    n_fine = int(round(n_fine))
    n_sub = 1
    if dt_coarse is not None:
        n_sub = dt_coarse / dt_mc
        if abs(n_sub - round(n_sub)) > 1e-9:
            raise TreeError(f"dt_mc={dt_mc} does not divide the tree step {dt_coarse}")
        n_sub = int(round(n_sub))
    return n_fine, n_sub


def bridge_paths(
    tree: ScenarioTree,
    leaf_path,
    M: int,
    d0: int,
    dt_mc: float,
    seed: int,
) -> PathBundle:
    """Brownian bridges through a leaf path plus free tail components.

    leaf_path may be a leaf index, an explicit per-level node-index
    sequence, or an (M,) array of per-path leaf indices (sampled tree).
    Deterministic given seed.
    """
    if d0 < tree.d:
        raise TreeError(f"need d0 >= d, got d0={d0} < d={tree.d}")
    n_fine, n_sub = _fine_steps(tree.horizon, dt_mc, tree.dt)
    if M * d0 * n_fine > _BUNDLE_GUARD:
        raise TreeError(
            "path bundle too large to materialize; simulate in chunks "
            f"(requested {M}x{d0}x{n_fine})"
        )
    per_path = False
    leaf_arr = np.asarray(leaf_path)
    if leaf_arr.ndim == 0:
        path = tree.leaf_path(int(leaf_arr))
    elif leaf_arr.ndim == 1 and leaf_arr.size == tree.n_steps + 1:
        path = leaf_arr.astype(np.int64)
    elif leaf_arr.ndim == 1 and leaf_arr.size == M:
        per_path = True
        path = leaf_arr.astype(np.int64)
    else:
        raise TreeError("leaf_path must be a leaf index, a node sequence, or (M,) draws")

    rng = np.random.default_rng(np.random.SeedSequence(seed_entropy(seed)))
    inc = rng.normal(0.0, np.sqrt(dt_mc), size=(M, d0, n_fine))
    if per_path:
        # coarse increments per path and component: (M, n_steps, d)
        anc = np.stack([tree.ancestor_index(path, k) for k in range(tree.n_steps + 1)], axis=1)
        coarse = np.stack([tree.omega[k][anc[:, k]] for k in range(tree.n_steps + 1)], axis=1)
        targets = np.swapaxes(np.diff(coarse, axis=1), 1, 2)  # (M, d, n_steps)
    else:
        targets = tree.path_increments(path).T[None, :, :]  # (1, d, n_steps)
    blocks = inc[:, : tree.d, :].reshape(M, tree.d, tree.n_steps, n_sub)
    excess = (blocks.sum(axis=3) - targets) / n_sub
    blocks -= excess[:, :, :, None]
    times = dt_mc * np.arange(n_fine + 1)
    return PathBundle(
        tree=tree,
        leaf_path=path,
        d_constrained=tree.d,
        d0=d0,
        dt_mc=dt_mc,
        seed=seed,
        times=times,
        increments=inc,
    )


def free_paths(horizon: float, M: int, d0: int, dt_mc: float, seed: int) -> PathBundle:
    """Unconstrained d0-dimensional Wiener increments on the fine mesh."""
    n_fine, _ = _fine_steps(horizon, dt_mc, None)
    if M * d0 * n_fine > _BUNDLE_GUARD:
        raise TreeError(
            "path bundle too large to materialize; simulate in chunks "
            f"(requested {M}x{d0}x{n_fine})"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed_entropy(seed)))
    inc = rng.normal(0.0, np.sqrt(dt_mc), size=(M, d0, n_fine))
    times = dt_mc * np.arange(n_fine + 1)
    return PathBundle(
        tree=None,
        leaf_path=None,
        d_constrained=0,
        d0=d0,
        dt_mc=dt_mc,
        seed=seed,
        times=times,
        increments=inc,
    )


def sample_tree_paths(
    tree: ScenarioTree, M: int, d0: int, dt_mc: float, seed: int
) -> PathBundle:
    """Bundle with leaves drawn uniformly per path and bridged increments.

    Used for unconditional estimates under tree-adapted coefficients: the
    driving components and the coefficient process then share the same
    discrete noise, matching the solver side.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed_entropy(seed, 0x1EAF)))
    draws = rng.integers(0, tree.n_leaves, size=M)
    return bridge_paths(tree, draws, M, d0, dt_mc, seed)
