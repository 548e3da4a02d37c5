"""Checks of the equilibrium conditions against the exact noise tree.

The tree evaluates conditional costs with no reference to the backward
recursions, so agreement between the two is an independent test of the
tables and of the policies built from them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .equilibrium import EquilibriumPolicy, stationarity_residual
from .linalg import DEFAULT_TOL, Tolerances
from .model import ProblemSpec
from .recursions import BackwardTables, feedback_backward, mixed_backward, open_loop_backward
from .simulate import NoiseTree, build_noise_tree, policy_assignment, tree_cost

DEFAULT_LAMBDAS = (-1.0, -0.5, 0.5, 1.0)
DEFAULT_GRID = tuple(np.linspace(-2.0, 2.0, 5))


def tables_for_policy(spec: ProblemSpec, policy: EquilibriumPolicy, tol: Tolerances = DEFAULT_TOL) -> BackwardTables:
    """Tables matching a policy's kind and feedback part, reusing cached ones."""
    if policy.tables is not None:
        return policy.tables
    if policy.kind == "open":
        return open_loop_backward(spec, policy.t, tol)
    if policy.kind == "feedback":
        return feedback_backward(spec, policy.t, tol)
    return mixed_backward(spec, policy.feedback_gain, policy.t, tol)


def _per_node(ubar, B: int, m: int) -> np.ndarray:
    ubar = np.asarray(ubar, dtype=float)
    if ubar.shape == (m,):
        return np.broadcast_to(ubar, (B, m)).copy()
    if ubar.shape != (B, m):
        raise ValueError(f"perturbation must have shape ({m},) or ({B}, {m}), got {ubar.shape}")
    return ubar


@dataclass
class PerturbationProbe:
    """Cost differences of a scaled one-stage deviation at every depth-``k`` node."""

    stage: int
    direction: np.ndarray
    lambdas: np.ndarray
    differences: np.ndarray
    linear: np.ndarray
    quadratic: np.ndarray
    predicted_linear: np.ndarray
    predicted_quadratic: np.ndarray
    fit_residual: float

    @property
    def linear_error(self) -> float:
        return float(np.max(np.abs(self.linear - self.predicted_linear)))

    @property
    def quadratic_error(self) -> float:
        return float(np.max(np.abs(self.quadratic - self.predicted_quadratic)))

    def passed(self, atol: float = 1e-8) -> bool:
        return self.linear_error <= atol and self.quadratic_error <= atol and self.fit_residual <= atol

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "nodes": int(self.linear.size),
            "linear_error": self.linear_error,
            "quadratic_error": self.quadratic_error,
            "fit_residual": self.fit_residual,
            "max_abs_linear": float(np.max(np.abs(self.linear))),
            "min_quadratic": float(np.min(self.quadratic)),
        }


def check_cost_difference(
    spec: ProblemSpec,
    policy: EquilibriumPolicy,
    t: int,
    x,
    k: int,
    ubar,
    lambdas=DEFAULT_LAMBDAS,
    tables: BackwardTables | None = None,
    tree: NoiseTree | None = None,
) -> PerturbationProbe:
    """Fit ``D(lam) = a lam + b lam^2`` on the tree and compare with the tables.

    The prediction is ``a = 2 r . ubar`` with ``r`` the stationarity residual
    at the node's equilibrium state, and ``b = ubar' O ubar`` with ``O`` the
    convexity operator of stage ``k``.
    """
    tables = tables if tables is not None else tables_for_policy(spec, policy)
    tree = tree if tree is not None else build_noise_tree(spec, t, x, policy)
    B = 2 ** (k - tree.t)
    u = _per_node(ubar, B, spec.m)
    lambdas = np.asarray(lambdas, dtype=float)
    base = tree_cost(spec, tree, k, policy_assignment(policy, tree, k))
    diffs = np.array([
        tree_cost(spec, tree, k, policy_assignment(policy, tree, k, lam * u)) - base for lam in lambdas
    ])
    design = np.column_stack([lambdas, lambdas ** 2])
    coef, *_ = np.linalg.lstsq(design, diffs, rcond=None)
    fit = float(np.max(np.abs(design @ coef - diffs), initial=0.0))
    Xk = tree.states[k - tree.t]
    r = stationarity_residual(policy, tables, Xk, k)
    return PerturbationProbe(
        stage=k,
        direction=u,
        lambdas=lambdas,
        differences=diffs,
        linear=coef[0],
        quadratic=coef[1],
        predicted_linear=2.0 * np.einsum("bi,bi->b", r, u),
        predicted_quadratic=np.einsum("bi,ij,bj->b", u, tables.convexity[k], u),
        fit_residual=fit,
    )


def _homogeneous(spec: ProblemSpec) -> ProblemSpec:
    zero = {name: np.zeros_like(getattr(spec, name)) for name in ("f", "d", "q", "rho", "g", "F")}
    return replace(spec, **zero)


def check_Jtilde_identity(
    spec: ProblemSpec,
    feedback_gain,
    t: int,
    k: int,
    ubar,
    tables: BackwardTables | None = None,
) -> float:
    """``max |J~(k, 0; ubar) - ubar' O_k ubar|`` over the depth-``k`` nodes.

    ``J~`` is the cost of the perturbation state alone: it starts at zero,
    receives ``ubar`` at stage ``k`` and is then driven by the feedback
    part only, with every affine term removed.
    """
    tables = tables if tables is not None else mixed_backward(spec, feedback_gain, t)
    tree = build_noise_tree(spec, t)
    B = 2 ** (k - t)
    u = _per_node(ubar, B, spec.m)
    gains = tables.feedback_gain

    def control(l, X):
        if l == k:
            return np.broadcast_to(u[:, None, :], X.shape[:2] + (spec.m,))
        return X @ gains[l].T

    value = tree_cost(_homogeneous(spec), tree, k, control, x_k=np.zeros(spec.n))
    predicted = np.einsum("bi,ij,bj->b", u, tables.convexity[k], u)
    return float(np.max(np.abs(value - predicted)))


@dataclass
class InequalityVerdict:
    passed: bool
    worst_margin: float
    threshold: float
    stages: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "worst_margin": self.worst_margin,
            "threshold": self.threshold,
            "stages": self.stages,
        }


def _fitted_deviations(spec, tree, policy, k, base, reach) -> list[np.ndarray]:
    """Worst deviations of the per-node quadratic fitted on the tree.

    Each node's cost difference is ``2 g'u + u'Hu`` in its own deviation
    ``u``; ``g`` and ``H`` come from ``m (m + 3) / 2`` tree evaluations.
    Returns the minimizer ``-H^+ g`` and, where ``H`` has a negative
    eigenvalue, steps along it long enough to lower the cost.
    """
    B, m = 2 ** (k - tree.t), spec.m
    E = np.eye(m)

    def diff(u):
        dev = np.broadcast_to(u, (B, m))
        return tree_cost(spec, tree, k, policy_assignment(policy, tree, k, dev)) - base

    plus = [diff(E[i]) for i in range(m)]
    minus = [diff(-E[i]) for i in range(m)]
    g = np.stack([(p - q) / 4 for p, q in zip(plus, minus)], axis=1)
    H = np.empty((B, m, m))
    for i in range(m):
        H[:, i, i] = (plus[i] + minus[i]) / 2
        for j in range(i):
            H[:, i, j] = H[:, j, i] = (diff(E[i] + E[j]) - plus[i] - plus[j]) / 2
    w, V = np.linalg.eigh(H)
    scale = np.maximum(1.0, np.abs(w).max(axis=1))
    inv = np.where(np.abs(w) > 1e-12 * scale[:, None], 1.0 / np.where(w == 0, 1.0, w), 0.0)
    gv = np.einsum("bij,bi->bj", V, g)
    out = [-np.einsum("bij,bj->bi", V, inv * gv)]
    low = w[:, 0]
    if np.any(low < -1e-9 * scale):
        v = V[:, :, 0]
        along = np.abs(gv[:, 0])
        step = np.where(low < 0, 2 * along / np.maximum(-low, 1e-300) + reach, 0.0)
        step = np.where(low < -1e-9 * scale, step, 0.0)
        out += [step[:, None] * v, -step[:, None] * v]
    return out


def check_definition_inequality(
    spec: ProblemSpec,
    policy: EquilibriumPolicy,
    t: int,
    x,
    k: int | None = None,
    grid=DEFAULT_GRID,
    random_assignments: int = 8,
    seed: int = 0,
    atol: float = 1e-9,
    tree: NoiseTree | None = None,
) -> InequalityVerdict:
    """Compare the equilibrium cost with every grid deviation at each node.

    Deviations are tried as the same vector at every node, as random
    node-dependent choices from the grid, and as the worst deviations of
    the per-node quadratic fitted on the tree. ``k=None`` checks every
    stage from ``t`` on. The verdict passes when no deviation lowers the
    cost by more than ``atol * max(1, |J|)``.
    """
    tree = tree if tree is not None else build_noise_tree(spec, t, x, policy)
    stages = range(t, spec.N) if k is None else [k]
    grid = np.asarray(grid, dtype=float)
    rng = np.random.default_rng(seed)
    vectors = np.array(list(itertools.product(grid, repeat=spec.m)))
    worst = np.inf
    threshold = 0.0
    per_stage = []
    for s in stages:
        B = 2 ** (s - tree.t)
        base = tree_cost(spec, tree, s, policy_assignment(policy, tree, s))
        scale = max(1.0, float(np.max(np.abs(base))))
        deviations = [np.broadcast_to(v, (B, spec.m)) for v in vectors]
        deviations += [vectors[rng.integers(0, len(vectors), size=B)] for _ in range(random_assignments)]
        deviations += _fitted_deviations(spec, tree, policy, s, base, float(np.max(np.abs(grid), initial=1.0)))
        margin = np.inf
        for dev in deviations:
            cost = tree_cost(spec, tree, s, policy_assignment(policy, tree, s, dev))
            margin = min(margin, float(np.min(cost - base)))
        per_stage.append({"stage": s, "worst_margin": margin, "scale": scale})
        worst = min(worst, margin)
        threshold = max(threshold, atol * scale)
    passed = all(p["worst_margin"] >= -atol * p["scale"] for p in per_stage)
    return InequalityVerdict(passed=passed, worst_margin=float(worst), threshold=threshold, stages=per_stage)


def _maxdiff(a, b, rows) -> float:
    return float(np.max(np.abs(a[rows] - b[rows]), initial=0.0))


def cross_check_reductions(spec: ProblemSpec, t: int = 0, tol: Tolerances = DEFAULT_TOL) -> dict:
    """Agreement of the mixed solver with the open-loop and feedback solvers.

    Reduction 1 runs the mixed solver with a zero feedback part and
    compares every table with the open-loop solver. Reduction 2 runs it
    with the feedback solver's gains and measures the coupling tables and
    open-loop gains, which must vanish.
    """
    rows = slice(t, spec.N)
    zero = np.zeros((spec.N, spec.m, spec.n))
    mixed0 = mixed_backward(spec, zero, t, tol)
    open_ = open_loop_backward(spec, t, tol)
    shared = (
        "pathwise_weight", "mean_weight", "pathwise_coupling", "mean_coupling", "terminal_link",
        "linear_term", "linear_coeff", "convexity", "stationarity", "state_coupling", "offset_term",
        "open_loop_gain", "offset",
    )
    red1 = {name: _maxdiff(getattr(mixed0, name), getattr(open_, name), rows) for name in shared}
    fb = feedback_backward(spec, t, tol)
    mixed_fb = mixed_backward(spec, fb.feedback_gain, t, tol)
    red2 = {
        "pathwise_coupling_norm": float(np.max(np.abs(mixed_fb.pathwise_coupling[rows]), initial=0.0)),
        "mean_coupling_norm": float(np.max(np.abs(mixed_fb.mean_coupling[rows]), initial=0.0)),
        "open_loop_gain_norm": float(np.max(np.abs(mixed_fb.open_loop_gain[rows]), initial=0.0)),
    }
    for name in ("stationarity", "convexity", "state_coupling", "offset_term", "pathwise_weight",
                 "mean_weight", "terminal_link", "linear_term"):
        red2[name] = _maxdiff(getattr(mixed_fb, name), getattr(fb, name), rows)
    red2["offset"] = _maxdiff(mixed_fb.offset, fb.offset, rows)
    return {
        "open_vs_mixed_zero_gain": red1,
        "open_vs_mixed_max": max(red1.values()),
        "feedback_vs_mixed": red2,
        "feedback_vs_mixed_max": max(red2.values()),
    }
