"""Backward recursions for the equilibrium operators.

Three solvers live here, deliberately written out separately so that
their agreement on shared special cases is a meaningful check:

* :func:`mixed_backward` takes a user supplied feedback part and derives
  the open-loop correction on top of it;
* :func:`open_loop_backward` is the pure open-loop system (no feedback part);
* :func:`feedback_backward` determines the feedback gain stage by stage.

All of them fill a :class:`BackwardTables`. Double-indexed tables use
the layout ``table[k, l]`` with ``k`` the evaluation stage and ``l`` the
running stage, ``k <= l <= N``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .linalg import DEFAULT_TOL, Tolerances, pinv, symmetrize
from .model import ProblemSpec


class RecursionBlowup(FloatingPointError):
    """A backward recursion produced non-finite values."""


def noise_form(delta, left, mid, right) -> np.ndarray:
    """``sum_ij delta[i, j] * left[i].T @ mid @ right[j]``.

    ``left`` and ``right`` are stacks over noise channels with shapes
    ``(p, r, a)`` and ``(p, r, b)``.
    """
    return np.einsum("ij,ira,rs,jsb->ab", delta, left, mid, right)


@dataclass
class BackwardTables:
    """Output of a backward solver.

    Attribute names describe what each table does:

    ``pathwise_weight`` / ``mean_weight``
        quadratic weights on ``E[X'WX]`` and on the conditional mean;
    ``pathwise_coupling`` / ``mean_coupling``
        cross weights between the evaluated state and the equilibrium path
        (zero for feedback solutions);
    ``terminal_link``
        propagated terminal cross weight between initial state and final mean;
    ``linear_term``
        affine part of the value function;
    ``convexity``
        second-order operator of a one-stage deviation;
    ``stationarity``, ``state_coupling``, ``offset_term``
        the operator, state coefficient and constant of the first-order
        condition ``stationarity @ u + state_coupling @ x + offset_term = 0``;
    ``feedback_gain``, ``open_loop_gain``, ``offset``
        the policy ``u = feedback_gain @ X + open_loop_gain @ X_eq + offset``.
    """

    kind: str
    t: int
    n: int
    m: int
    N: int
    feedback_gain: np.ndarray
    open_loop_gain: np.ndarray
    offset: np.ndarray
    pathwise_weight: np.ndarray
    mean_weight: np.ndarray
    pathwise_coupling: np.ndarray
    mean_coupling: np.ndarray
    terminal_link: np.ndarray
    linear_term: np.ndarray
    linear_coeff: np.ndarray
    convexity: np.ndarray
    stationarity: np.ndarray
    state_coupling: np.ndarray
    offset_term: np.ndarray
    stationarity_asymmetry: np.ndarray
    tol: Tolerances = DEFAULT_TOL
    notes: list = field(default_factory=list)

    @property
    def stages(self) -> range:
        return range(self.t, self.N)

    @property
    def closed_loop_gain(self) -> np.ndarray:
        return self.feedback_gain + self.open_loop_gain

    @classmethod
    def empty(cls, kind, spec: ProblemSpec, t: int, tol: Tolerances) -> "BackwardTables":
        n, m, N = spec.n, spec.m, spec.N
        z = np.zeros
        return cls(
            kind=kind, t=t, n=n, m=m, N=N,
            feedback_gain=z((N, m, n)),
            open_loop_gain=z((N, m, n)),
            offset=z((N, m)),
            pathwise_weight=z((N, N + 1, n, n)),
            mean_weight=z((N, N + 1, n, n)),
            pathwise_coupling=z((N, N + 1, n, n)),
            mean_coupling=z((N, N + 1, n, n)),
            terminal_link=z((N, N + 1, n, n)),
            linear_term=z((N, N + 1, n)),
            linear_coeff=z((N, N, n, m)),
            convexity=z((N, m, m)),
            stationarity=z((N, m, m)),
            state_coupling=z((N, m, n)),
            offset_term=z((N, m)),
            stationarity_asymmetry=z(N),
            tol=tol,
        )

    def _check_finite(self, k: int) -> None:
        parts = (
            self.pathwise_weight[k], self.mean_weight[k], self.pathwise_coupling[k],
            self.mean_coupling[k], self.terminal_link[k], self.linear_term[k],
            self.convexity[k], self.stationarity[k], self.state_coupling[k],
            self.offset_term[k], self.feedback_gain[k], self.open_loop_gain[k],
        )
        if not all(np.all(np.isfinite(a)) for a in parts):
            raise RecursionBlowup(f"{self.kind} recursion produced non-finite values at stage {k}")


def _blowup_checked(solver):
    # overflow is reported through RecursionBlowup, not numpy warnings
    @functools.wraps(solver)
    def run(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return solver(*args, **kwargs)

    return run


def _gains_array(spec: ProblemSpec, gains, t: int) -> np.ndarray:
    gains = np.asarray(gains, dtype=float)
    N, m, n = spec.N, spec.m, spec.n
    if gains.ndim == 2 and gains.shape == (m, n):
        gains = np.broadcast_to(gains, (N, m, n))
    if gains.ndim != 3 or gains.shape[1:] != (m, n) or gains.shape[0] not in (N, N - t):
        raise ValueError(f"feedback gains must have shape ({N} or {N - t}, {m}, {n}), got {gains.shape}")
    full = np.zeros((N, m, n))
    full[N - gains.shape[0]:] = gains
    full[:t] = 0.0
    if not np.all(np.isfinite(full[t:])):
        raise ValueError("feedback gains contain non-finite entries")
    return full


def _terminal(tab: BackwardTables, spec: ProblemSpec, k: int, N: int) -> None:
    tab.pathwise_weight[k, N] = spec.G[k]
    tab.mean_weight[k, N] = spec.G[k] + spec.Gbar[k]
    tab.terminal_link[k, N] = spec.F[k]
    tab.linear_term[k, N] = spec.g[k]


@_blowup_checked
def mixed_backward(spec: ProblemSpec, feedback_gain, t: int = 0, tol: Tolerances = DEFAULT_TOL) -> BackwardTables:
    """Tables of the mixed solution built on a given feedback part.

    Parameters
    ----------
    feedback_gain : array_like
        ``(N, m, n)`` or ``(N - t, m, n)`` stack of gains, one per stage.
    t : int
        First stage of the horizon.
    """
    t = spec.check_stage(t)
    N = spec.N
    Phi = _gains_array(spec, feedback_gain, t)
    tab = BackwardTables.empty("mixed", spec, t, tol)
    tab.feedback_gain[:] = Phi
    S, Sm, T, Tm = tab.pathwise_weight, tab.mean_weight, tab.pathwise_coupling, tab.mean_coupling
    U, pi = tab.terminal_link, tab.linear_term

    def row_step(k: int, l: int) -> None:
        dl = spec.delta[l]
        A, B, C, D = spec.A[k, l], spec.B[k, l], spec.C[k, l], spec.D[k, l]
        Am, Bm = A + spec.Abar[k, l], B + spec.Bbar[k, l]
        Cm, Dm = C + spec.Cbar[k, l], D + spec.Dbar[k, l]
        R, Rm = spec.R[k, l], spec.R[k, l] + spec.Rbar[k, l]
        Q, Qm = spec.Q[k, l], spec.Q[k, l] + spec.Qbar[k, l]
        P, Gam, c = Phi[l], tab.open_loop_gain[l], tab.offset[l]
        # equilibrium-path coefficients use the diagonal (l, l) data
        Bd = spec.B[l, l] + spec.Bbar[l, l]
        Dd = spec.D[l, l] + spec.Dbar[l, l]
        Acl = spec.A[l, l] + spec.Abar[l, l] + Bd @ (P + Gam)
        Ccl = spec.C[l, l] + spec.Cbar[l, l] + Dd @ (P + Gam)
        fd, dd = spec.f[l, l], spec.d[l, l]

        Ax, Cx = A + B @ P, C + D @ P
        Amx, Cmx = Am + Bm @ P, Cm + Dm @ P
        S1, Sm1, T1, Tm1 = S[k, l + 1], Sm[k, l + 1], T[k, l + 1], Tm[k, l + 1]

        S[k, l] = symmetrize(Q + P.T @ R @ P + Ax.T @ S1 @ Ax + noise_form(dl, Cx, S1, Cx))
        Sm[k, l] = symmetrize(Qm + P.T @ Rm @ P + Amx.T @ Sm1 @ Amx + noise_form(dl, Cmx, S1, Cmx))
        T[k, l] = (
            (P.T @ R + Ax.T @ S1 @ B + noise_form(dl, Cx, S1, D)) @ Gam
            + Ax.T @ T1 @ Acl + noise_form(dl, Cx, T1, Ccl)
        )
        Tm[k, l] = (
            (P.T @ Rm + Amx.T @ Sm1 @ Bm + noise_form(dl, Cmx, S1, Dm)) @ Gam
            + Amx.T @ Tm1 @ Acl + noise_form(dl, Cmx, T1, Ccl)
        )
        U[k, l] = Amx.T @ U[k, l + 1]
        beta = (
            P.T @ Rm + Amx.T @ (Sm1 @ Bm + Tm1 @ Bd)
            + noise_form(dl, Cmx, S1, Dm) + noise_form(dl, Cmx, T1, Dd)
        )
        tab.linear_coeff[k, l] = beta
        pi[k, l] = (
            beta @ c
            + Amx.T @ (Sm1 @ spec.f[k, l] + pi[k, l + 1])
            + noise_form(dl, Cmx, S1, spec.d[k, l][:, :, None])[:, 0]
            + noise_form(dl, Cmx, T1, dd[:, :, None])[:, 0]
            + Amx.T @ Tm1 @ fd
            + P.T @ spec.rho[k, l]
            + spec.q[k, l]
        )

    for k in range(N - 1, t - 1, -1):
        _terminal(tab, spec, k, N)
        for l in range(N - 1, k, -1):
            row_step(k, l)
        dk = spec.delta[k]
        Bk, Dk = spec.B[k, k] + spec.Bbar[k, k], spec.D[k, k] + spec.Dbar[k, k]
        Ak, Ck = spec.A[k, k] + spec.Abar[k, k], spec.C[k, k] + spec.Cbar[k, k]
        Rk = spec.R[k, k] + spec.Rbar[k, k]
        S1, Sm1, T1, Tm1 = S[k, k + 1], Sm[k, k + 1], T[k, k + 1], Tm[k, k + 1]
        tab.convexity[k] = symmetrize(Rk + Bk.T @ Sm1 @ Bk + noise_form(dk, Dk, S1, Dk))
        O = Rk + Bk.T @ (Sm1 + Tm1) @ Bk + noise_form(dk, Dk, S1 + T1, Dk)
        tab.stationarity[k] = O
        tab.stationarity_asymmetry[k] = float(np.max(np.abs(O - O.T), initial=0.0))
        tab.state_coupling[k] = (
            Bk.T @ (Sm1 + Tm1) @ Ak + noise_form(dk, Dk, S1 + T1, Ck) + Bk.T @ U[k, k + 1]
        )
        tab.offset_term[k] = (
            Bk.T @ (Sm1 + Tm1) @ spec.f[k, k]
            + noise_form(dk, Dk, S1 + T1, spec.d[k, k][:, :, None])[:, 0]
            + Bk.T @ pi[k, k + 1]
            + spec.rho[k, k]
        )
        Op = pinv(O, tol)
        tab.open_loop_gain[k] = -Op @ tab.state_coupling[k] - Phi[k]
        tab.offset[k] = -Op @ tab.offset_term[k]
        row_step(k, k)
        tab._check_finite(k)
    return tab


@_blowup_checked
def open_loop_backward(spec: ProblemSpec, t: int = 0, tol: Tolerances = DEFAULT_TOL) -> BackwardTables:
    """Tables of the open-loop equilibrium control (no feedback part)."""
    t = spec.check_stage(t)
    N = spec.N
    tab = BackwardTables.empty("open", spec, t, tol)
    S, Sm, T, Tm = tab.pathwise_weight, tab.mean_weight, tab.pathwise_coupling, tab.mean_coupling
    U, pi = tab.terminal_link, tab.linear_term
    # pinv(O_l) @ L_l and pinv(O_l) @ theta_l, stored per running stage
    gain_part = np.zeros((N, spec.m, spec.n))
    offset_part = np.zeros((N, spec.m))

    def row_step(k: int, l: int) -> None:
        dl = spec.delta[l]
        A, B, C, D = spec.A[k, l], spec.B[k, l], spec.C[k, l], spec.D[k, l]
        Am, Bm = A + spec.Abar[k, l], B + spec.Bbar[k, l]
        Cm, Dm = C + spec.Cbar[k, l], D + spec.Dbar[k, l]
        Bd = spec.B[l, l] + spec.Bbar[l, l]
        Dd = spec.D[l, l] + spec.Dbar[l, l]
        Acl = spec.A[l, l] + spec.Abar[l, l] - Bd @ gain_part[l]
        Ccl = spec.C[l, l] + spec.Cbar[l, l] - Dd @ gain_part[l]
        S1, Sm1, T1, Tm1 = S[k, l + 1], Sm[k, l + 1], T[k, l + 1], Tm[k, l + 1]

        S[k, l] = symmetrize(spec.Q[k, l] + A.T @ S1 @ A + noise_form(dl, C, S1, C))
        Sm[k, l] = symmetrize(
            spec.Q[k, l] + spec.Qbar[k, l] + Am.T @ Sm1 @ Am + noise_form(dl, Cm, S1, Cm)
        )
        T[k, l] = (
            -(A.T @ S1 @ B + noise_form(dl, C, S1, D)) @ gain_part[l]
            + A.T @ T1 @ Acl + noise_form(dl, C, T1, Ccl)
        )
        Tm[k, l] = (
            -(Am.T @ Sm1 @ Bm + noise_form(dl, Cm, S1, Dm)) @ gain_part[l]
            + Am.T @ Tm1 @ Acl + noise_form(dl, Cm, T1, Ccl)
        )
        U[k, l] = Am.T @ U[k, l + 1]
        beta = (
            Am.T @ Sm1 @ Bm + Am.T @ Tm1 @ Bd
            + noise_form(dl, Cm, S1, Dm) + noise_form(dl, Cm, T1, Dd)
        )
        tab.linear_coeff[k, l] = beta
        pi[k, l] = (
            -beta @ offset_part[l]
            + Am.T @ (Sm1 @ spec.f[k, l] + pi[k, l + 1])
            + noise_form(dl, Cm, S1, spec.d[k, l][:, :, None])[:, 0]
            + noise_form(dl, Cm, T1, spec.d[l, l][:, :, None])[:, 0]
            + Am.T @ Tm1 @ spec.f[l, l]
            + spec.q[k, l]
        )

    for k in range(N - 1, t - 1, -1):
        _terminal(tab, spec, k, N)
        for l in range(N - 1, k, -1):
            row_step(k, l)
        dk = spec.delta[k]
        Bk, Dk = spec.B[k, k] + spec.Bbar[k, k], spec.D[k, k] + spec.Dbar[k, k]
        Ak, Ck = spec.A[k, k] + spec.Abar[k, k], spec.C[k, k] + spec.Cbar[k, k]
        Rk = spec.R[k, k] + spec.Rbar[k, k]
        S1, Sm1, T1, Tm1 = S[k, k + 1], Sm[k, k + 1], T[k, k + 1], Tm[k, k + 1]
        ST, SmT = S1 + T1, Sm1 + Tm1
        tab.convexity[k] = symmetrize(Rk + Bk.T @ Sm1 @ Bk + noise_form(dk, Dk, S1, Dk))
        O = Rk + Bk.T @ SmT @ Bk + noise_form(dk, Dk, ST, Dk)
        tab.stationarity[k] = O
        tab.stationarity_asymmetry[k] = float(np.max(np.abs(O - O.T), initial=0.0))
        L = Bk.T @ SmT @ Ak + noise_form(dk, Dk, ST, Ck) + Bk.T @ U[k, k + 1]
        theta = (
            Bk.T @ SmT @ spec.f[k, k]
            + noise_form(dk, Dk, ST, spec.d[k, k][:, :, None])[:, 0]
            + Bk.T @ pi[k, k + 1]
            + spec.rho[k, k]
        )
        tab.state_coupling[k] = L
        tab.offset_term[k] = theta
        Op = pinv(O, tol)
        gain_part[k] = Op @ L
        offset_part[k] = Op @ theta
        tab.open_loop_gain[k] = -gain_part[k]
        tab.offset[k] = -offset_part[k]
        row_step(k, k)
        tab._check_finite(k)
    return tab


@_blowup_checked
def feedback_backward(spec: ProblemSpec, t: int = 0, tol: Tolerances = DEFAULT_TOL) -> BackwardTables:
    """Tables of the linear feedback equilibrium strategy.

    The coupling tables and the open-loop gain stay identically zero;
    ``stationarity`` equals ``convexity`` and ``feedback_gain`` holds the
    self-consistent gains.
    """
    t = spec.check_stage(t)
    N = spec.N
    tab = BackwardTables.empty("feedback", spec, t, tol)
    S, Sm, U, pi = tab.pathwise_weight, tab.mean_weight, tab.terminal_link, tab.linear_term
    Phi, v = tab.feedback_gain, tab.offset

    def row_step(k: int, l: int) -> None:
        dl = spec.delta[l]
        P = Phi[l]
        Ax = spec.A[k, l] + spec.B[k, l] @ P
        Cx = spec.C[k, l] + spec.D[k, l] @ P
        Bm = spec.B[k, l] + spec.Bbar[k, l]
        Dm = spec.D[k, l] + spec.Dbar[k, l]
        Amx = spec.A[k, l] + spec.Abar[k, l] + Bm @ P
        Cmx = spec.C[k, l] + spec.Cbar[k, l] + Dm @ P
        Rm = spec.R[k, l] + spec.Rbar[k, l]
        S1, Sm1 = S[k, l + 1], Sm[k, l + 1]
        S[k, l] = symmetrize(
            spec.Q[k, l] + P.T @ spec.R[k, l] @ P + Ax.T @ S1 @ Ax + noise_form(dl, Cx, S1, Cx)
        )
        Sm[k, l] = symmetrize(
            spec.Q[k, l] + spec.Qbar[k, l] + P.T @ Rm @ P + Amx.T @ Sm1 @ Amx
            + noise_form(dl, Cmx, S1, Cmx)
        )
        U[k, l] = Amx.T @ U[k, l + 1]
        beta = P.T @ Rm + Amx.T @ Sm1 @ Bm + noise_form(dl, Cmx, S1, Dm)
        tab.linear_coeff[k, l] = beta
        pi[k, l] = (
            beta @ v[l]
            + Amx.T @ (Sm1 @ spec.f[k, l] + pi[k, l + 1])
            + noise_form(dl, Cmx, S1, spec.d[k, l][:, :, None])[:, 0]
            + P.T @ spec.rho[k, l]
            + spec.q[k, l]
        )

    for k in range(N - 1, t - 1, -1):
        _terminal(tab, spec, k, N)
        for l in range(N - 1, k, -1):
            row_step(k, l)
        dk = spec.delta[k]
        Bk, Dk = spec.B[k, k] + spec.Bbar[k, k], spec.D[k, k] + spec.Dbar[k, k]
        Ak, Ck = spec.A[k, k] + spec.Abar[k, k], spec.C[k, k] + spec.Cbar[k, k]
        S1, Sm1 = S[k, k + 1], Sm[k, k + 1]
        O = symmetrize(spec.R[k, k] + spec.Rbar[k, k] + Bk.T @ Sm1 @ Bk + noise_form(dk, Dk, S1, Dk))
        L = Bk.T @ Sm1 @ Ak + noise_form(dk, Dk, S1, Ck) + Bk.T @ U[k, k + 1]
        theta = (
            Bk.T @ Sm1 @ spec.f[k, k]
            + noise_form(dk, Dk, S1, spec.d[k, k][:, :, None])[:, 0]
            + Bk.T @ pi[k, k + 1]
            + spec.rho[k, k]
        )
        tab.convexity[k] = O
        tab.stationarity[k] = O
        tab.state_coupling[k] = L
        tab.offset_term[k] = theta
        Op = pinv(O, tol)
        Phi[k] = -Op @ L
        v[k] = -Op @ theta
        row_step(k, k)
        tab._check_finite(k)
    return tab
