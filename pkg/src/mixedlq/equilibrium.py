"""Policies built from backward tables, and existence/uniqueness checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    DEFAULT_TOL, Tolerances, in_range, is_invertible, is_pd, is_psd, min_eig_sym,
    range_residual,
)
from .model import ProblemSpec
from .recursions import BackwardTables, feedback_backward, mixed_backward, open_loop_backward

YES, NO, STATE_DEPENDENT, NOT_REQUESTED = "yes", "no", "state_dependent", "not_requested"
KINDS = ("open", "feedback", "mixed")


@dataclass
class EquilibriumPolicy:
    """Affine policy ``u_k = Phi_k X_k + Gamma_k X*_k + c_k``.

    Arrays cover the whole horizon, shape ``(N, m, n)`` or ``(N, m)``;
    rows before ``t`` are unused. ``tables`` keeps the run the policy was
    built from, when there is one.
    """

    kind: str
    t: int
    feedback_gain: np.ndarray
    open_loop_gain: np.ndarray
    offset: np.ndarray
    tables: BackwardTables | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.feedback_gain.shape[0]

    @property
    def gain(self) -> np.ndarray:
        """Closed-loop gain applied along the policy's own path."""
        return self.feedback_gain + self.open_loop_gain

    def to_dict(self) -> dict:
        s = slice(self.t, self.N)
        return {
            "t": self.t,
            "kind": self.kind,
            "K": self.gain[s].tolist(),
            "Phi": self.feedback_gain[s].tolist(),
            "Gamma": self.open_loop_gain[s].tolist(),
            "c": self.offset[s].tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict, spec: ProblemSpec) -> "EquilibriumPolicy":
        """Inverse of :meth:`to_dict`; ``K`` is checked against ``Phi + Gamma``."""
        try:
            t = int(doc["t"])
            kind = doc.get("kind", "mixed")
            parts = {key: np.asarray(doc[key], dtype=float) for key in ("Phi", "Gamma", "c")}
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed policy document: {exc}") from None
        N, m, n = spec.N, spec.m, spec.n
        if kind not in KINDS:
            raise ValueError(f"unknown policy kind {kind!r}")
        if not 0 <= t < N:
            raise ValueError(f"policy start stage {t} outside 0..{N - 1}")
        length = N - t
        expected = {"Phi": (length, m, n), "Gamma": (length, m, n), "c": (length, m)}
        full = {}
        for key, arr in parts.items():
            if arr.shape != expected[key]:
                raise ValueError(f"policy {key}: expected shape {expected[key]}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"policy {key}: non-finite entries")
            out = np.zeros((N,) + expected[key][1:])
            out[t:] = arr
            full[key] = out
        if "K" in doc:
            K = np.asarray(doc["K"], dtype=float)
            if K.shape != expected["Phi"] or not np.allclose(K, parts["Phi"] + parts["Gamma"], atol=1e-9):
                raise ValueError("policy K does not equal Phi + Gamma")
        return cls(kind, t, full["Phi"], full["Gamma"], full["c"])


def build_policy(tables: BackwardTables) -> EquilibriumPolicy:
    # feedback tables already store zero open-loop gains and v in `offset`
    return EquilibriumPolicy(
        kind=tables.kind,
        t=tables.t,
        feedback_gain=tables.feedback_gain.copy(),
        open_loop_gain=tables.open_loop_gain.copy(),
        offset=tables.offset.copy(),
        tables=tables,
    )


def stationarity_residual(policy: EquilibriumPolicy, tables: BackwardTables, X, k: int) -> np.ndarray:
    """First-order residual of the stage-``k`` deviation problem at state ``X``.

    ``X`` may carry leading batch axes; the result has matching axes and a
    trailing axis of length ``m``.
    """
    X = np.asarray(X, dtype=float)
    u = X @ policy.gain[k].T + policy.offset[k]
    return u @ tables.stationarity[k].T + X @ tables.state_coupling[k].T + tables.offset_term[k]


# ------------------------------------------------------------ stage checks

@dataclass
class StageCheck:
    stage: int
    convexity_min_eig: float
    convexity_psd: bool
    convexity_pd: bool
    gain_range_residual: float
    gain_in_range: bool
    offset_range_residual: float
    offset_in_range: bool
    stationarity_invertible: bool
    stationarity_sigma_ratio: float
    stationarity_asymmetry: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def stage_checks(tables: BackwardTables, tol: Tolerances = DEFAULT_TOL) -> list[StageCheck]:
    out = []
    for k in tables.stages:
        O = tables.stationarity[k]
        s = np.linalg.svd(O, compute_uv=False)
        ratio = float(s[-1] / s[0]) if s[0] > 0 else 0.0
        out.append(StageCheck(
            stage=k,
            convexity_min_eig=min_eig_sym(tables.convexity[k]),
            convexity_psd=is_psd(tables.convexity[k], tol),
            convexity_pd=is_pd(tables.convexity[k], tol),
            gain_range_residual=range_residual(O, tables.state_coupling[k], tol),
            gain_in_range=in_range(O, tables.state_coupling[k], tol),
            offset_range_residual=range_residual(O, tables.offset_term[k], tol),
            offset_in_range=in_range(O, tables.offset_term[k], tol),
            stationarity_invertible=is_invertible(O, tol),
            stationarity_sigma_ratio=ratio,
            stationarity_asymmetry=float(tables.stationarity_asymmetry[k]),
        ))
    return out


@dataclass
class KindAssessment:
    kind: str
    verdict: str
    stages: list
    violating_samples: int | None = None
    samples: int | None = None
    label: str | None = None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "verdict": self.verdict,
            "stages": [s.to_dict() for s in self.stages],
        }
        if self.samples is not None:
            d["samples"] = self.samples
            d["violating_samples"] = self.violating_samples
        if self.label is not None:
            d["label"] = self.label
        return d


@dataclass
class ExistenceReport:
    scope: str
    t: int
    x: list | None
    open_exists: str
    feedback_exists: str
    mixed_exists_for_given_phi: str
    open_unique: str
    feedback_unique: str
    H_holds: str
    details: dict
    assumption_H: dict

    def verdicts(self) -> dict:
        return {
            "open_exists": self.open_exists,
            "feedback_exists": self.feedback_exists,
            "mixed_exists_for_given_phi": self.mixed_exists_for_given_phi,
            "open_unique": self.open_unique,
            "feedback_unique": self.feedback_unique,
            "H_holds": self.H_holds,
        }

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "t": self.t,
            "x": self.x,
            "verdicts": self.verdicts(),
            "details": {k: v.to_dict() for k, v in self.details.items()},
            "assumption_H": self.assumption_H,
        }


def _path_range_violations(spec, tables, t, x, tol, n_samples, seed) -> tuple[int, int]:
    """Count sampled equilibrium paths on which the range condition fails."""
    from .simulate import NoiseModel, sample_paths

    policy = build_policy(tables)
    X0 = np.asarray(x, dtype=float)
    if not in_range(tables.stationarity[t], tables.state_coupling[t] @ X0 + tables.offset_term[t], tol):
        return n_samples, n_samples
    paths = sample_paths(spec, policy, t, X0, NoiseModel("gaussian", spec.delta), n_samples, seed)
    bad = np.zeros(n_samples, dtype=bool)
    for k in range(t + 1, spec.N):
        O = tables.stationarity[k]
        for r in range(n_samples):
            if bad[r]:
                continue
            v = tables.state_coupling[k] @ paths.states[r, k - t] + tables.offset_term[k]
            bad[r] = not in_range(O, v, tol)
    return int(bad.sum()), n_samples


def _assess(kind, tables, spec, scope, t, x, tol, n_samples, seed) -> KindAssessment:
    checks = stage_checks(tables, tol)
    first = t if scope == "fixed" else 0
    checks = [c for c in checks if c.stage >= first]
    psd = all(c.convexity_psd for c in checks)
    identities = all(c.gain_in_range and c.offset_in_range for c in checks)
    result = KindAssessment(kind, NO, checks)
    if psd and identities:
        result.verdict = YES
    elif psd and scope == "fixed":
        bad, total = _path_range_violations(spec, tables, t, x, tol, n_samples, seed)
        result.verdict = NO if bad else STATE_DEPENDENT
        result.violating_samples, result.samples = bad, total
    if kind == "mixed":
        Gam = tables.open_loop_gain[first:]
        K = tables.closed_loop_gain[first:]
        tiny = np.max(np.abs(Gam), initial=0.0) <= tol.range_tol * max(1.0, np.max(np.abs(K), initial=0.0))
        result.label = "feedback-compatible" if tiny else "mixed"
    return result


def assumption_H_check(spec: ProblemSpec, tol: Tolerances = DEFAULT_TOL) -> dict:
    """Itemized sign conditions on the weights for every valid index."""
    N = spec.N
    pairs = [(t, k) for t in range(N) for k in range(t, N)]
    items = {
        "Q_psd": all(is_psd(spec.Q[t, k], tol) for t, k in pairs),
        "Q_total_psd": all(is_psd(spec.Q[t, k] + spec.Qbar[t, k], tol) for t, k in pairs),
        "G_psd": all(is_psd(spec.G[t], tol) for t in range(N)),
        "G_total_psd": all(is_psd(spec.G[t] + spec.Gbar[t], tol) for t in range(N)),
        "R_pd": all(is_pd(spec.R[t, k], tol) for t, k in pairs),
        "R_total_pd": all(is_pd(spec.R[t, k] + spec.Rbar[t, k], tol) for t, k in pairs),
    }
    items["holds"] = all(items.values())
    # under these conditions a unique feedback strategy exists for every pair
    items["unique_feedback_for_all_pairs"] = items["holds"]
    return items


def uniqueness_check(spec: ProblemSpec, t: int = 0, tol: Tolerances = DEFAULT_TOL,
                     open_tables=None, feedback_tables=None) -> dict:
    open_tables = open_tables or open_loop_backward(spec, t, tol)
    feedback_tables = feedback_tables or feedback_backward(spec, t, tol)
    stages = range(t, spec.N)
    open_ok = all(
        is_psd(open_tables.convexity[k], tol) and is_invertible(open_tables.stationarity[k], tol)
        for k in stages
    )
    fb_ok = all(is_pd(feedback_tables.convexity[k], tol) for k in stages)
    return {
        "open_unique": YES if open_ok else NO,
        "feedback_unique": YES if fb_ok else NO,
        "open_convexity_min_eig": [min_eig_sym(open_tables.convexity[k]) for k in stages],
        "feedback_convexity_min_eig": [min_eig_sym(feedback_tables.convexity[k]) for k in stages],
    }


def classify_existence(
    spec: ProblemSpec,
    scope: str = "all",
    feedback_gain=None,
    t: int = 0,
    x=None,
    tol: Tolerances = DEFAULT_TOL,
    n_samples: int = 256,
    seed: int = 0,
) -> ExistenceReport:
    """Existence and uniqueness verdicts for every solution kind.

    ``scope="all"`` certifies every initial pair through operator
    identities; ``scope="fixed"`` concerns the single pair ``(t, x)``.
    The mixed verdict is only produced when ``feedback_gain`` is given.
    """
    if scope not in ("all", "fixed"):
        raise ValueError(f"scope must be 'all' or 'fixed', got {scope!r}")
    if scope == "fixed":
        if x is None:
            raise ValueError("fixed-pair classification needs an initial state x")
        x = np.asarray(x, dtype=float)
        if x.shape != (spec.n,):
            raise ValueError(f"initial state must have length {spec.n}")
    start = t if scope == "fixed" else 0
    spec.check_stage(start)
    tables = {
        "open": open_loop_backward(spec, start, tol),
        "feedback": feedback_backward(spec, start, tol),
    }
    if feedback_gain is not None:
        tables["mixed"] = mixed_backward(spec, feedback_gain, start, tol)
    details = {
        kind: _assess(kind, tab, spec, scope, start, x, tol, n_samples, seed)
        for kind, tab in tables.items()
    }
    uniq = uniqueness_check(spec, start, tol, tables["open"], tables["feedback"])
    h = assumption_H_check(spec, tol)
    return ExistenceReport(
        scope=scope,
        t=start,
        x=None if x is None else x.tolist(),
        open_exists=details["open"].verdict,
        feedback_exists=details["feedback"].verdict,
        mixed_exists_for_given_phi=details["mixed"].verdict if "mixed" in details else NOT_REQUESTED,
        open_unique=uniq["open_unique"],
        feedback_unique=uniq["feedback_unique"],
        H_holds=YES if h["holds"] else NO,
        details=details,
        assumption_H=h,
    )
