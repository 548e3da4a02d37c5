"""Problem data for discrete-time mean-field stochastic LQ control.

A :class:`ProblemSpec` stores every coefficient on the full ``(t, k)``
grid: the first index is the stage at which the cost is evaluated, the
second is the running stage. Arrays carry the pair in their two leading
axes, so ``spec.A[t, k]`` is the ``n x n`` drift matrix used by the
evaluator sitting at stage ``t`` for the transition out of stage ``k``.
Entries with ``t > k`` are never read and are stored as zeros.

Terminal data (``G``, ``Gbar``, ``F``, ``g``) depend on the evaluation
stage only, and the noise second moment ``delta`` on the running stage.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import DEFAULT_TOL, Tolerances, min_eig_sym

ASYMMETRY_LIMIT = 1e-9


class ProblemError(ValueError):
    """Raised when a problem document is malformed or inconsistent."""


# family name -> (shape template, symmetric?)
# symbols in the template: n states, m controls, p noise channels
PAIR_FAMILIES = {
    "A": (("n", "n"), False),
    "Abar": (("n", "n"), False),
    "B": (("n", "m"), False),
    "Bbar": (("n", "m"), False),
    "C": (("p", "n", "n"), False),
    "Cbar": (("p", "n", "n"), False),
    "D": (("p", "n", "m"), False),
    "Dbar": (("p", "n", "m"), False),
    "f": (("n",), False),
    "d": (("p", "n"), False),
    "Q": (("n", "n"), True),
    "Qbar": (("n", "n"), True),
    "R": (("m", "m"), True),
    "Rbar": (("m", "m"), True),
    "q": (("n",), False),
    "rho": (("m",), False),
}
TERMINAL_FAMILIES = {
    "G": (("n", "n"), True),
    "Gbar": (("n", "n"), True),
    "F": (("n", "n"), False),
    "g": (("n",), False),
}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Immutable coefficient container.

    Pair families have shape ``(N, N, *entry)``, terminal families
    ``(N, *entry)`` and ``delta`` has shape ``(N, p, p)``.
    """

    n: int
    m: int
    p: int
    N: int
    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    f: np.ndarray
    d: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    R: np.ndarray
    Rbar: np.ndarray
    q: np.ndarray
    rho: np.ndarray
    G: np.ndarray
    Gbar: np.ndarray
    F: np.ndarray
    g: np.ndarray
    delta: np.ndarray
    max_asymmetry: float = 0.0
    notes: tuple = field(default=())

    def entry_shape(self, name: str) -> tuple:
        template = (PAIR_FAMILIES.get(name) or TERMINAL_FAMILIES[name])[0]
        dims = {"n": self.n, "m": self.m, "p": self.p}
        return tuple(dims[s] for s in template)

    def check_stage(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.N:
            raise IndexError(f"stage {t} outside 0..{self.N - 1}")
        return t


@dataclass(frozen=True)
class CompositeCoeffs:
    """Sums of each coefficient with its mean-field counterpart."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    G: np.ndarray


def composites(spec: ProblemSpec, t: int, k: int) -> CompositeCoeffs:
    t = spec.check_stage(t)
    k = spec.check_stage(k)
    if k < t:
        raise IndexError(f"need t <= k, got t={t}, k={k}")
    return CompositeCoeffs(
        A=spec.A[t, k] + spec.Abar[t, k],
        B=spec.B[t, k] + spec.Bbar[t, k],
        C=spec.C[t, k] + spec.Cbar[t, k],
        D=spec.D[t, k] + spec.Dbar[t, k],
        Q=spec.Q[t, k] + spec.Qbar[t, k],
        R=spec.R[t, k] + spec.Rbar[t, k],
        G=spec.G[t] + spec.Gbar[t],
    )


# ---------------------------------------------------------------- building

def _coerce(value, shape: tuple, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"{where}: not a numeric array ({exc})") from None
    if arr.shape != shape:
        # shorthand: scalars for 1x1, flat vectors for single columns,
        # single-channel matrices without the channel axis
        if arr.ndim < len(shape) and arr.size == int(np.prod(shape)):
            arr = arr.reshape(shape)
        else:
            raise ProblemError(f"{where}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ProblemError(f"{where}: non-finite entries")
    return arr


def _symmetrized(arr: np.ndarray, where: str) -> tuple[np.ndarray, float]:
    asym = float(np.max(np.abs(arr - np.swapaxes(arr, -1, -2)), initial=0.0))
    if asym > ASYMMETRY_LIMIT:
        raise ProblemError(f"{where}: asymmetric weight (max |M - M^T| = {asym:.3g})")
    return 0.5 * (arr + np.swapaxes(arr, -1, -2)), asym


def make_problem(n, m, p, N, tol: Tolerances = DEFAULT_TOL, **families) -> ProblemSpec:
    """Build a spec from full arrays; omitted families default to zero.

    Pair families must have shape ``(N, N, *entry)``, terminal families
    ``(N, *entry)``, and ``delta`` ``(N, p, p)``. A family may also be
    given with a single entry shape, in which case it is broadcast.
    """
    n, m, p, N = int(n), int(m), int(p), int(N)
    if min(n, m, p, N) < 1:
        raise ProblemError("n, m, p and N must all be positive integers")
    dims = {"n": n, "m": m, "p": p}
    unknown = set(families) - set(PAIR_FAMILIES) - set(TERMINAL_FAMILIES) - {"delta"}
    if unknown:
        raise ProblemError(f"unknown coefficient families: {sorted(unknown)}")
    out = {}
    max_asym = 0.0
    lower = np.tril(np.ones((N, N), dtype=bool), -1)  # t > k
    for name, (template, sym) in {**PAIR_FAMILIES, **TERMINAL_FAMILIES}.items():
        entry = tuple(dims[s] for s in template)
        lead = (N, N) if name in PAIR_FAMILIES else (N,)
        value = families.get(name)
        if value is None:
            arr = np.zeros(lead + entry)
        else:
            arr = np.asarray(value, dtype=float)
            if arr.shape != lead + entry:
                arr = np.broadcast_to(_coerce(arr, entry, name), lead + entry).copy()
            if not np.all(np.isfinite(arr)):
                raise ProblemError(f"{name}: non-finite entries")
        if sym:
            arr, asym = _symmetrized(arr, name)
            max_asym = max(max_asym, asym)
        if name in PAIR_FAMILIES:
            arr = arr.copy()
            arr[lower] = 0.0
        out[name] = _freeze(arr)
    delta = families.get("delta")
    if delta is None:
        delta = np.broadcast_to(np.eye(p), (N, p, p)).copy()
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (N, p, p):
        delta = np.broadcast_to(_coerce(delta, (p, p), "delta"), (N, p, p)).copy()
    delta, asym = _symmetrized(delta, "delta")
    max_asym = max(max_asym, asym)
    for k in range(N):
        scale = max(1.0, float(np.linalg.norm(delta[k], 2)))
        if min_eig_sym(delta[k]) < -tol.psd_tol * scale:
            raise ProblemError(f"delta[{k}] is not positive semidefinite")
    out["delta"] = _freeze(delta)
    return ProblemSpec(n=n, m=m, p=p, N=N, max_asymmetry=max_asym, **out)


def _parse_pair_family(name, value, entry, N, stationary) -> np.ndarray:
    arr = np.zeros((N, N) + entry)
    if isinstance(value, dict):
        seen = set()
        for key, item in value.items():
            try:
                t, k = (int(s) for s in str(key).split(","))
            except ValueError:
                raise ProblemError(f"{name}: bad index key {key!r}, expected 't,k'") from None
            if not 0 <= t <= k < N:
                raise ProblemError(f"{name}: index {key!r} outside 0 <= t <= k < {N}")
            arr[t, k] = _coerce(item, entry, f"{name}[{key}]")
            seen.add((t, k))
        missing = [(t, k) for t in range(N) for k in range(t, N) if (t, k) not in seen]
        if missing:
            t, k = missing[0]
            raise ProblemError(f"{name}: missing entry '{t},{k}' ({len(missing)} missing)")
        return arr
    if not stationary:
        raise ProblemError(f"{name}: expected a map keyed 't,k' when stationary_in_t is false")
    if not isinstance(value, list) or len(value) != N:
        raise ProblemError(f"{name}: expected a list of {N} stage entries")
    for k, item in enumerate(value):
        arr[: k + 1, k] = _coerce(item, entry, f"{name}[{k}]")
    return arr


def _parse_staged(name, value, entry, N) -> np.ndarray:
    """One entry per stage, or a single entry shared by every stage."""
    try:
        single = _coerce(value, entry, name)
        return np.broadcast_to(single, (N,) + entry).copy()
    except ProblemError:
        pass
    if not isinstance(value, list) or len(value) != N:
        raise ProblemError(f"{name}: expected one entry of shape {entry} or a list of {N}")
    return np.stack([_coerce(item, entry, f"{name}[{i}]") for i, item in enumerate(value)])


def problem_from_dict(doc: dict, tol: Tolerances = DEFAULT_TOL) -> ProblemSpec:
    """Validate a parsed problem document and build the spec."""
    if not isinstance(doc, dict):
        raise ProblemError("problem document must be a JSON object")
    for key in ("n", "m", "p", "N"):
        if key not in doc:
            raise ProblemError(f"missing top-level field {key!r}")
        if not isinstance(doc[key], int) or isinstance(doc[key], bool) or doc[key] < 1:
            raise ProblemError(f"{key!r} must be a positive integer")
    n, m, p, N = doc["n"], doc["m"], doc["p"], doc["N"]
    stationary = doc.get("stationary_in_t", False)
    if not isinstance(stationary, bool):
        raise ProblemError("'stationary_in_t' must be a boolean")
    matrices = doc.get("matrices", {})
    if not isinstance(matrices, dict):
        raise ProblemError("'matrices' must be an object")
    known = set(PAIR_FAMILIES) | set(TERMINAL_FAMILIES)
    unknown = set(matrices) - known
    if unknown:
        raise ProblemError(f"unknown matrix families: {sorted(unknown)}")
    extra = set(doc) - {"n", "m", "p", "N", "stationary_in_t", "matrices", "noise", "description"}
    if extra:
        raise ProblemError(f"unknown top-level fields: {sorted(extra)}")
    dims = {"n": n, "m": m, "p": p}
    families = {}
    for name, value in matrices.items():
        template = (PAIR_FAMILIES.get(name) or TERMINAL_FAMILIES[name])[0]
        entry = tuple(dims[s] for s in template)
        if name in PAIR_FAMILIES:
            families[name] = _parse_pair_family(name, value, entry, N, stationary)
        else:
            families[name] = _parse_staged(name, value, entry, N)
    noise = doc.get("noise", {})
    if not isinstance(noise, dict):
        raise ProblemError("'noise' must be an object")
    if "delta" in noise:
        families["delta"] = _parse_staged("delta", noise["delta"], (p, p), N)
    return make_problem(n, m, p, N, tol=tol, **families)


def load_problem(source, tol: Tolerances = DEFAULT_TOL) -> ProblemSpec:
    """Load a problem from a path, a JSON string or an already-parsed dict."""
    if isinstance(source, dict):
        return problem_from_dict(source, tol)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ProblemError(f"cannot read problem file: {exc}") from None
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"invalid JSON: {exc}") from None
    return problem_from_dict(doc, tol)


def problem_to_dict(spec: ProblemSpec) -> dict:
    """Full ``t,k``-keyed document; floats round-trip exactly through JSON."""
    N = spec.N
    matrices = {}
    for name in PAIR_FAMILIES:
        arr = getattr(spec, name)
        matrices[name] = {f"{t},{k}": arr[t, k].tolist() for t in range(N) for k in range(t, N)}
    for name in TERMINAL_FAMILIES:
        matrices[name] = getattr(spec, name).tolist()
    return {
        "n": spec.n,
        "m": spec.m,
        "p": spec.p,
        "N": spec.N,
        "stationary_in_t": False,
        "matrices": matrices,
        "noise": {"delta": spec.delta.tolist()},
    }


def dump_problem(spec: ProblemSpec) -> str:
    return json.dumps(problem_to_dict(spec), sort_keys=True)


def fingerprint(spec: ProblemSpec) -> str:
    """SHA-256 of the canonical serialization."""
    return hashlib.sha256(dump_problem(spec).encode()).hexdigest()


# ---------------------------------------------------------- builtin example

_EXAMPLE_A = [
    [[1.0, 0.4], [0.3, 2.0]],
    [[1.102, -0.24], [0.53, 1.89]],
    [[1.89, 0.49], [0.0, 1.75]],
    [[0.8, -0.4], [0.2, 0.7]],
]
_EXAMPLE_B = [[1.2, -0.5], [1.0, 1.0], [1.2, 0.2], [1.0, 0.3]]
_EXAMPLE_D = [[1.0, 0.3], [1.0, 0.4], [0.45, 0.25], [0.52, 0.0]]
_EXAMPLE_Q = [
    [[3.0, 0.5], [0.5, -2.0]],
    [[2.0, -0.65], [-0.65, 0.0]],
    [[0.5, 0.5], [0.5, -2.0]],
    [[-0.1, 0.0], [0.0, -0.75]],
]
_EXAMPLE_R = [0.0, -2.5, 1.0, -0.5]
_EXAMPLE_G = [[1.0, -0.1], [-0.1, 1.0]]
_EXAMPLE_GBAR = [[-0.3, 0.0], [0.0, -0.3]]


def example_document() -> dict:
    """Problem document for the builtin four-stage example."""
    return {
        "description": (
            "Four-stage example with n=2, m=1, p=1; coefficients depend on the "
            "running stage only; all mean-field system terms and affine data are zero."
        ),
        "n": 2,
        "m": 1,
        "p": 1,
        "N": 4,
        "stationary_in_t": True,
        "matrices": {
            "A": _EXAMPLE_A,
            "B": [[[b0], [b1]] for b0, b1 in _EXAMPLE_B],
            "D": [[[[d0], [d1]]] for d0, d1 in _EXAMPLE_D],
            "Q": _EXAMPLE_Q,
            "R": [[[r]] for r in _EXAMPLE_R],
            "G": _EXAMPLE_G,
            "Gbar": _EXAMPLE_GBAR,
        },
        "noise": {"delta": [[[1.0]]] * 4},
    }


def builtin_example() -> ProblemSpec:
    return problem_from_dict(example_document())


def zero_problem(n=1, m=1, p=1, N=1, **families) -> ProblemSpec:
    return make_problem(n, m, p, N, **families)


def one_step_problem() -> ProblemSpec:
    """``N=1``, scalar: ``x' = x + u``, cost ``u^2 + x'^2``."""
    return make_problem(1, 1, 1, 1, A=[[1.0]], B=[[1.0]], R=[[1.0]], G=[[1.0]])


def format_document(doc, indent: int = 0) -> str:
    """JSON text with every innermost numeric list kept on one line."""
    pad = " " * indent
    inner = " " * (indent + 2)
    if isinstance(doc, dict):
        if not doc:
            return "{}"
        items = [f"{inner}{json.dumps(k)}: {format_document(v, indent + 2)}" for k, v in doc.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(doc, list) and doc and any(isinstance(v, (list, dict)) for v in doc):
        items = [f"{inner}{format_document(v, indent + 2)}" for v in doc]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    return json.dumps(doc)
