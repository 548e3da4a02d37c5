"""Forward simulation, exact moments and the two-point noise tree.

Two different processes appear when a policy is evaluated from stage ``t``:

* the equilibrium path ``X*``, which at stage ``k`` moves with the data
  ``(k, k)`` and the closed-loop control ``K_k X* + c_k``;
* the cost state ``X`` of the problem started at ``t``, which moves with
  the data ``(t, k)`` under ``Phi_k X + Gamma_k X* + c_k``.

When coefficients do not depend on the evaluation stage the two coincide.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ProblemSpec

MAX_TREE_DEPTH = 12


class TreeDepthError(ValueError):
    """The requested noise tree would exceed the depth bound."""


@dataclass(frozen=True)
class NoiseModel:
    """Martingale-difference noise with per-stage second moments ``delta``.

    ``variant`` is ``"gaussian"`` or ``"two_point"``; the latter needs a
    single channel and draws ``+-sqrt(delta)`` with equal probability.
    """

    variant: str
    delta: np.ndarray

    def __post_init__(self):
        if self.variant not in ("gaussian", "two_point"):
            raise ValueError(f"unknown noise variant {self.variant!r}")
        if self.variant == "two_point" and np.shape(self.delta)[-1] != 1:
            raise ValueError("two-point noise needs a single noise channel")

    def roots(self) -> np.ndarray:
        """Symmetric square roots of every stage's second-moment matrix."""
        w, V = np.linalg.eigh(np.asarray(self.delta, dtype=float))
        return np.einsum("kij,kj,klj->kil", V, np.sqrt(np.clip(w, 0.0, None)), V)

    def draw(self, rng: np.random.Generator, stages) -> np.ndarray:
        """One draw per listed stage, shape ``(len(stages), p)``."""
        stages = list(stages)
        p = np.shape(self.delta)[-1]
        if self.variant == "gaussian":
            z = rng.standard_normal((len(stages), p))
            roots = self.roots()[stages]
            return np.einsum("kij,kj->ki", roots, z)
        signs = rng.integers(0, 2, size=(len(stages), 1)) * 2.0 - 1.0
        return signs * np.sqrt(np.asarray(self.delta)[stages, 0, :])


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream for replicate ``rep``; does not depend on other replicates."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(rep),)))


# ----------------------------------------------------------------- moments

@dataclass
class Moments:
    """Exact first and second moments from stage ``t`` to ``N``.

    ``mean``/``second`` describe the equilibrium path; ``cost_mean`` and
    ``cost_second`` the cost state. ``cost`` is the exact objective value.
    """

    t: int
    mean: np.ndarray
    second: np.ndarray
    cost_mean: np.ndarray
    cost_second: np.ndarray
    cost: float

    @property
    def covariance(self) -> np.ndarray:
        return self.second - np.einsum("ki,kj->kij", self.mean, self.mean)


def _quad_expect(W, second) -> float:
    return float(np.sum(W * second))


def moment_propagation(spec: ProblemSpec, policy, t: int, x) -> Moments:
    """Propagate the joint (cost state, equilibrium path) moments exactly."""
    t = spec.check_stage(t)
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise ValueError(f"initial state must have length {spec.n}")
    if not all(hasattr(policy, a) for a in ("feedback_gain", "open_loop_gain", "offset")):
        raise TypeError("moment propagation needs an affine policy")
    n, N = spec.n, spec.N
    z_mean = np.concatenate([x, x])
    z_second = np.outer(z_mean, z_mean)
    means, seconds = [z_mean.copy()], [z_second.copy()]
    cost = 0.0
    for l in range(t, N):
        P, Gam, c = policy.feedback_gain[l], policy.open_loop_gain[l], policy.offset[l]
        K = P + Gam
        mu, mu_eq = z_mean[:n], z_mean[n:]
        A, Ab, B, Bb = spec.A[t, l], spec.Abar[t, l], spec.B[t, l], spec.Bbar[t, l]
        C, Cb, D, Db = spec.C[t, l], spec.Cbar[t, l], spec.D[t, l], spec.Dbar[t, l]
        Ad = spec.A[l, l] + spec.Abar[l, l]
        Bd = spec.B[l, l] + spec.Bbar[l, l]
        Cd = spec.C[l, l] + spec.Cbar[l, l]
        Dd = spec.D[l, l] + spec.Dbar[l, l]

        H = np.hstack([P, Gam])  # control of the cost state
        u_mean = H @ z_mean + c
        u_second = H @ z_second @ H.T + np.outer(H @ z_mean, c) + np.outer(c, H @ z_mean) + np.outer(c, c)
        cost += (
            _quad_expect(spec.Q[t, l], z_second[:n, :n]) + mu @ spec.Qbar[t, l] @ mu
            + _quad_expect(spec.R[t, l], u_second) + u_mean @ spec.Rbar[t, l] @ u_mean
            + 2 * spec.q[t, l] @ mu + 2 * spec.rho[t, l] @ u_mean
        )

        M = np.block([[A + B @ P, B @ Gam], [np.zeros((n, n)), Ad + Bd @ K]])
        b = np.concatenate([
            Ab @ mu + Bb @ (P @ mu + Gam @ mu_eq) + (B + Bb) @ c + spec.f[t, l],
            Bd @ c + spec.f[l, l],
        ])
        Nz = np.concatenate(
            [np.concatenate([C + D @ P, D @ Gam], axis=2),
             np.concatenate([np.zeros_like(Cd), Cd + Dd @ K], axis=2)],
            axis=1,
        )
        e = np.concatenate([
            np.einsum("pij,j->pi", Cb, mu) + np.einsum("pij,j->pi", Db, P @ mu + Gam @ mu_eq)
            + (D + Db) @ c + spec.d[t, l],
            Dd @ c + spec.d[l, l],
        ], axis=1)
        dl = spec.delta[l]
        Mm = M @ z_mean
        new_second = M @ z_second @ M.T + np.outer(Mm, b) + np.outer(b, Mm) + np.outer(b, b)
        Nm = np.einsum("pij,j->pi", Nz, z_mean)
        new_second = new_second + (
            np.einsum("ij,iab,bc,jdc->ad", dl, Nz, z_second, Nz)
            + np.einsum("ij,ia,jb->ab", dl, Nm, e)
            + np.einsum("ij,ia,jb->ab", dl, e, Nm)
            + np.einsum("ij,ia,jb->ab", dl, e, e)
        )
        z_mean = Mm + b
        z_second = 0.5 * (new_second + new_second.T)
        means.append(z_mean.copy())
        seconds.append(z_second.copy())
    mu_N = z_mean[:n]
    cost += (
        _quad_expect(spec.G[t], z_second[:n, :n]) + mu_N @ spec.Gbar[t] @ mu_N
        + 2 * (spec.F[t] @ x + spec.g[t]) @ mu_N
    )
    means = np.array(means)
    seconds = np.array(seconds)
    return Moments(
        t=t,
        mean=means[:, n:],
        second=seconds[:, n:, n:],
        cost_mean=means[:, :n],
        cost_second=seconds[:, :n, :n],
        cost=float(cost),
    )


# -------------------------------------------------------------- simulation

@dataclass
class Trajectories:
    """Sampled equilibrium paths.

    ``states`` has shape ``(reps, N - t + 1, n)``, ``controls``
    ``(reps, N - t, m)`` and ``noise`` ``(reps, N - t, p)``.
    ``cost_states`` follows the cost state driven by the same noise.
    """

    t: int
    seed: int
    states: np.ndarray
    controls: np.ndarray
    noise: np.ndarray
    cost_states: np.ndarray
    cost_controls: np.ndarray

    @property
    def reps(self) -> int:
        return self.states.shape[0]


def sample_paths(spec, policy, t, x, model: NoiseModel, reps: int, seed: int) -> Trajectories:
    t = spec.check_stage(t)
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise ValueError(f"initial state must have length {spec.n}")
    if reps < 1:
        raise ValueError("reps must be positive")
    N, n, m, p = spec.N, spec.n, spec.m, spec.p
    steps = N - t
    noise = np.stack([model.draw(replicate_rng(seed, r), range(t, N)) for r in range(reps)])
    # exact means feed the mean-field terms of the cost state
    exact = moment_propagation(spec, policy, t, x)
    cost_mu = exact.cost_mean
    X = np.empty((reps, steps + 1, n))
    Y = np.empty((reps, steps + 1, n))
    U = np.empty((reps, steps, m))
    V = np.empty((reps, steps, m))
    X[:, 0] = x
    Y[:, 0] = x
    for j, l in enumerate(range(t, N)):
        P, Gam, c = policy.feedback_gain[l], policy.open_loop_gain[l], policy.offset[l]
        w = noise[:, j]
        Xe = X[:, j]
        u = Xe @ (P + Gam).T + c
        U[:, j] = u
        Ad = spec.A[l, l] + spec.Abar[l, l]
        Bd = spec.B[l, l] + spec.Bbar[l, l]
        Cd = spec.C[l, l] + spec.Cbar[l, l]
        Dd = spec.D[l, l] + spec.Dbar[l, l]
        diff = np.einsum("pij,rj->rpi", Cd, Xe) + np.einsum("pij,rj->rpi", Dd, u) + spec.d[l, l]
        X[:, j + 1] = Xe @ Ad.T + u @ Bd.T + spec.f[l, l] + np.einsum("rpi,rp->ri", diff, w)

        mu = cost_mu[j]
        Yc = Y[:, j]
        v = Yc @ P.T + Xe @ Gam.T + c
        v_mean = P @ mu + Gam @ exact.mean[j] + c
        V[:, j] = v
        A, Ab, B, Bb = spec.A[t, l], spec.Abar[t, l], spec.B[t, l], spec.Bbar[t, l]
        diff = (
            np.einsum("pij,rj->rpi", spec.C[t, l], Yc) + spec.Cbar[t, l] @ mu
            + np.einsum("pij,rj->rpi", spec.D[t, l], v) + spec.Dbar[t, l] @ v_mean
            + spec.d[t, l]
        )
        Y[:, j + 1] = (
            Yc @ A.T + Ab @ mu + v @ B.T + Bb @ v_mean + spec.f[t, l]
            + np.einsum("rpi,rp->ri", diff, w)
        )
    return Trajectories(t, int(seed), X, U, noise, Y, V)


@dataclass
class SimulationSummary:
    mean: np.ndarray
    covariance: np.ndarray
    mean_standard_error: np.ndarray
    cost_estimate: float
    cost_standard_error: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "mean_standard_error": self.mean_standard_error.tolist(),
            "cost_estimate": self.cost_estimate,
            "cost_standard_error": self.cost_standard_error,
        }


def summarize(spec: ProblemSpec, paths: Trajectories, x) -> SimulationSummary:
    """Per-stage sample moments and a Monte-Carlo estimate of the cost.

    Mean-field cost terms use sample means; the standard error covers the
    pathwise part only.
    """
    t, N = paths.t, spec.N
    reps = paths.reps
    X = paths.states
    mean = X.mean(axis=0)
    cov = np.einsum("rki,rkj->kij", X - mean, X - mean) / max(reps - 1, 1)
    se = X.std(axis=0, ddof=1) / np.sqrt(reps) if reps > 1 else np.zeros_like(mean)
    Y, V = paths.cost_states, paths.cost_controls
    pathwise = np.zeros(reps)
    mean_field = 0.0
    for j, l in enumerate(range(t, N)):
        y, v = Y[:, j], V[:, j]
        pathwise += (
            np.einsum("ri,ij,rj->r", y, spec.Q[t, l], y) + np.einsum("ri,ij,rj->r", v, spec.R[t, l], v)
            + 2 * y @ spec.q[t, l] + 2 * v @ spec.rho[t, l]
        )
        ym, vm = y.mean(axis=0), v.mean(axis=0)
        mean_field += ym @ spec.Qbar[t, l] @ ym + vm @ spec.Rbar[t, l] @ vm
    yN = Y[:, -1]
    pathwise += np.einsum("ri,ij,rj->r", yN, spec.G[t], yN) + 2 * yN @ (spec.F[t] @ np.asarray(x) + spec.g[t])
    ym = yN.mean(axis=0)
    mean_field += ym @ spec.Gbar[t] @ ym
    cost_se = float(pathwise.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return SimulationSummary(mean, cov, se, float(pathwise.mean() + mean_field), cost_se)


def simulate_closed_loop(spec, policy, t, x, model: NoiseModel, reps: int, seed: int):
    """Sample ``reps`` equilibrium paths and summarize them."""
    paths = sample_paths(spec, policy, t, x, model, reps, seed)
    return paths, summarize(spec, paths, x)


def _fmt(v: float) -> str:
    return repr(float(v))


def trajectory_rows(paths: Trajectories, rep: int, with_rep: bool = False):
    t = paths.t
    steps = paths.controls.shape[1]
    m, p = paths.controls.shape[2], paths.noise.shape[2]
    for j in range(steps + 1):
        row = [str(rep)] if with_rep else []
        row.append(str(t + j))
        row += [_fmt(v) for v in paths.states[rep, j]]
        if j < steps:
            row += [_fmt(v) for v in paths.controls[rep, j]]
            row += [_fmt(v) for v in paths.noise[rep, j]]
        else:
            row += [""] * (m + p)
        yield row


def csv_header(n: int, m: int, p: int, with_rep: bool = False) -> list[str]:
    head = ["rep"] if with_rep else []
    return head + ["stage"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)] + [
        f"w{i + 1}" for i in range(p)
    ]


def write_trajectories_csv(paths: Trajectories, out_dir, long_format: bool = False) -> list[Path]:
    """Write one CSV per replicate, or a single long table with a ``rep`` column."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n, m, p = paths.states.shape[2], paths.controls.shape[2], paths.noise.shape[2]
    width = max(5, len(str(paths.reps - 1)))
    targets = []
    if long_format:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(csv_header(n, m, p, True))
        for r in range(paths.reps):
            writer.writerows(trajectory_rows(paths, r, True))
        targets.append((out_dir / "trajectories.csv", buf.getvalue()))
    else:
        for r in range(paths.reps):
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(csv_header(n, m, p))
            writer.writerows(trajectory_rows(paths, r))
            targets.append((out_dir / f"trajectory_{r:0{width}d}.csv", buf.getvalue()))
    written = []
    for path, text in targets:
        tmp = path.with_suffix(".csv.tmp")
        tmp.write_text(text)
        tmp.replace(path)
        written.append(path)
    return written


# ------------------------------------------------------------- noise tree

@dataclass
class NoiseTree:
    """Complete binary lattice of two-point noise from stage ``t`` to ``N``.

    Nodes at depth ``d`` (stage ``t + d``) are numbered ``0 .. 2**d - 1``
    with the earliest noise as the most significant bit, branch 0 carrying
    ``+sqrt(delta)``. Every node at depth ``d`` has probability ``2**-d``.
    ``states[d]`` holds equilibrium-path states when the tree was built
    with a policy.
    """

    t: int
    N: int
    amplitude: np.ndarray
    states: list | None = None
    policy: object = None

    @property
    def depth(self) -> int:
        return self.N - self.t

    def paths(self, depth: int) -> np.ndarray:
        """Realized noise sequence leading to each node, shape ``(2**d, d)``."""
        idx = np.arange(2 ** depth)
        bits = (idx[:, None] >> np.arange(depth - 1, -1, -1)[None, :]) & 1
        return np.where(bits == 0, 1.0, -1.0) * self.amplitude[:depth]

    def probabilities(self, depth: int) -> np.ndarray:
        return np.full(2 ** depth, 0.5 ** depth)

    def blocks(self, level_values: np.ndarray, k: int, l: int) -> np.ndarray:
        """Group a depth-``l`` array under its depth-``k`` ancestors."""
        B = 2 ** (k - self.t)
        return level_values.reshape((B, 2 ** (l - k)) + level_values.shape[1:])

    def conditional_mean(self, level_values: np.ndarray, k: int, l: int) -> np.ndarray:
        return self.blocks(level_values, k, l).mean(axis=1)


def _branch(drift: np.ndarray, diff: np.ndarray, amp: float) -> np.ndarray:
    """Children of every node: axis 1 doubles, child ``2j + b``."""
    kids = np.stack([drift + amp * diff, drift - amp * diff], axis=2)
    return kids.reshape(drift.shape[0], -1, drift.shape[-1])


def build_noise_tree(spec: ProblemSpec, t: int, x=None, policy=None, max_depth: int = MAX_TREE_DEPTH) -> NoiseTree:
    """Tree of two-point noise; with ``x`` and ``policy`` also the equilibrium states."""
    t = spec.check_stage(t)
    if spec.p != 1:
        raise ValueError("the noise tree supports a single noise channel only")
    if spec.N - t > max_depth:
        raise TreeDepthError(f"tree depth {spec.N - t} exceeds the bound {max_depth}")
    amp = np.sqrt(spec.delta[t:, 0, 0])
    tree = NoiseTree(t=t, N=spec.N, amplitude=amp, policy=policy)
    if x is None or policy is None:
        return tree
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise ValueError(f"initial state must have length {spec.n}")
    X = x[None, :]
    states = [X]
    for j, l in enumerate(range(t, spec.N)):
        K = policy.feedback_gain[l] + policy.open_loop_gain[l]
        c = policy.offset[l]
        u = X @ K.T + c
        Ad = spec.A[l, l] + spec.Abar[l, l]
        Bd = spec.B[l, l] + spec.Bbar[l, l]
        Cd = spec.C[l, l][0] + spec.Cbar[l, l][0]
        Dd = spec.D[l, l][0] + spec.Dbar[l, l][0]
        drift = X @ Ad.T + u @ Bd.T + spec.f[l, l]
        diff = X @ Cd.T + u @ Dd.T + spec.d[l, l][0]
        X = _branch(drift[None], diff[None], amp[j])[0]
        states.append(X)
    tree.states = states
    return tree


def tree_cost(spec: ProblemSpec, tree: NoiseTree, k: int, control, x_k=None) -> np.ndarray:
    """Exact conditional cost at every depth-``k`` node.

    Parameters
    ----------
    control : callable
        ``control(l, X)`` receives states of shape ``(B, M, n)`` (``B``
        nodes at stage ``k``, ``M`` descendants each) and returns controls
        of shape ``(B, M, m)``.
    x_k : array_like, optional
        States at the depth-``k`` nodes, ``(B, n)`` or ``(n,)``. Defaults
        to the tree's equilibrium states.
    """
    if not tree.t <= k < tree.N:
        raise IndexError(f"stage {k} outside {tree.t}..{tree.N - 1}")
    B = 2 ** (k - tree.t)
    if x_k is None:
        if tree.states is None:
            raise ValueError("tree has no states; pass x_k")
        Xk = tree.states[k - tree.t]
    else:
        Xk = np.broadcast_to(np.asarray(x_k, dtype=float), (B, spec.n))
    X = Xk[:, None, :].copy()
    cost = np.zeros(B)
    for l in range(k, tree.N):
        u = np.asarray(control(l, X), dtype=float)
        if u.shape != X.shape[:2] + (spec.m,):
            raise ValueError(f"control assignment at stage {l} has shape {u.shape}, expected {X.shape[:2] + (spec.m,)}")
        EX, Eu = X.mean(axis=1), u.mean(axis=1)
        cost += (
            np.einsum("bmi,ij,bmj->bm", X, spec.Q[k, l], X).mean(axis=1)
            + np.einsum("bi,ij,bj->b", EX, spec.Qbar[k, l], EX)
            + np.einsum("bmi,ij,bmj->bm", u, spec.R[k, l], u).mean(axis=1)
            + np.einsum("bi,ij,bj->b", Eu, spec.Rbar[k, l], Eu)
            + 2 * EX @ spec.q[k, l] + 2 * Eu @ spec.rho[k, l]
        )
        drift = (
            X @ spec.A[k, l].T + (EX @ spec.Abar[k, l].T)[:, None]
            + u @ spec.B[k, l].T + (Eu @ spec.Bbar[k, l].T)[:, None] + spec.f[k, l]
        )
        diff = (
            X @ spec.C[k, l][0].T + (EX @ spec.Cbar[k, l][0].T)[:, None]
            + u @ spec.D[k, l][0].T + (Eu @ spec.Dbar[k, l][0].T)[:, None] + spec.d[k, l][0]
        )
        X = _branch(drift, diff, tree.amplitude[l - tree.t])
    EX = X.mean(axis=1)
    cost += (
        np.einsum("bmi,ij,bmj->bm", X, spec.G[k], X).mean(axis=1)
        + np.einsum("bi,ij,bj->b", EX, spec.Gbar[k], EX)
        + 2 * np.einsum("bi,bi->b", Xk @ spec.F[k].T + spec.g[k], EX)
    )
    return cost


def policy_assignment(policy, tree: NoiseTree, k: int, deviation=None):
    """Controls of Definition-style deviations from an equilibrium policy.

    At stage ``l`` the assignment is ``Phi_l X + Gamma_l X*_l + c_l`` with
    ``X*`` read off the tree's equilibrium states; ``deviation`` (shape
    ``(m,)`` or ``(B, m)``) is added at stage ``k`` only.
    """
    if tree.states is None:
        raise ValueError("tree must carry equilibrium states")
    t = tree.t

    def control(l, X):
        Xeq = tree.blocks(tree.states[l - t], k, l)
        u = X @ policy.feedback_gain[l].T + Xeq @ policy.open_loop_gain[l].T + policy.offset[l]
        if l == k and deviation is not None:
            dev = np.asarray(deviation, dtype=float)
            u = u + (dev[:, None, :] if dev.ndim == 2 else dev)
        return u

    return control
