"""Small dense linear-algebra helpers shared by the solvers.

Every routine here works on plain ``numpy`` arrays. Problem sizes are
tiny (a handful of states and controls), so nothing is optimised for
large or sparse inputs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

import numpy as np

ENV_PREFIX = "MIXEDLQ_"


@dataclass(frozen=True)
class Tolerances:
    """Numerical slack used when testing exact matrix conditions.

    Parameters
    ----------
    pinv_rtol : float
        Singular values below ``pinv_rtol * sigma_max * max(shape)`` are
        treated as zero by :func:`pinv`.
    psd_tol : float
        Allowed negative eigenvalue, scaled by ``max(1, ||M||_2)``.
    range_tol : float
        Allowed range-membership residual, scaled by ``max(1, ||v||)``.
    invert_rtol : float
        A square matrix counts as invertible when
        ``sigma_min > invert_rtol * sigma_max``.
    """

    pinv_rtol: float = 1e-12
    psd_tol: float = 1e-8
    range_tol: float = 1e-8
    invert_rtol: float = 1e-10

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"tolerance {f.name} must be positive, got {value!r}")

    @classmethod
    def from_env(cls, environ=None, **overrides) -> "Tolerances":
        """Defaults, then ``MIXEDLQ_<NAME>`` variables, then explicit overrides."""
        environ = os.environ if environ is None else environ
        values = {}
        for f in fields(cls):
            raw = environ.get(ENV_PREFIX + f.name.upper())
            if raw is not None:
                values[f.name] = float(raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return replace(cls(), **values)


DEFAULT_TOL = Tolerances()


def _as_square(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return M


def symmetrize(M) -> np.ndarray:
    """Return ``(M + M.T) / 2``."""
    M = _as_square(M)
    return 0.5 * (M + M.T)


def pinv(M, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """Moore-Penrose inverse through a thin SVD.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the SVD does not converge or ``M`` has non-finite entries.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"pinv expects a 2-d array, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError("pinv: matrix has non-finite entries")
    if M.size == 0:
        return np.zeros((M.shape[1], M.shape[0]))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cutoff = tol.pinv_rtol * s[0] * max(M.shape)
    keep = s > cutoff
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def min_eig_sym(M) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    M = _as_square(M)
    if M.shape[0] == 0:
        return np.inf
    return float(np.linalg.eigvalsh(M)[0])


def is_psd(M, tol: Tolerances = DEFAULT_TOL) -> bool:
    M = symmetrize(M)
    scale = max(1.0, np.linalg.norm(M, 2)) if M.size else 1.0
    return bool(min_eig_sym(M) >= -tol.psd_tol * scale)


def is_pd(M, tol: Tolerances = DEFAULT_TOL) -> bool:
    """Strict version of :func:`is_psd`: eigenvalues must clear the slack."""
    M = symmetrize(M)
    scale = max(1.0, np.linalg.norm(M, 2)) if M.size else 1.0
    return bool(min_eig_sym(M) > tol.psd_tol * scale)


def range_residual(O, V, tol: Tolerances = DEFAULT_TOL) -> float:
    """``||O O^+ V - V||`` for a vector or a matrix of column vectors."""
    O = _as_square(O)
    V = np.asarray(V, dtype=float)
    if V.shape[0] != O.shape[0]:
        raise ValueError(f"dimension mismatch: O is {O.shape}, v has {V.shape[0]} rows")
    return float(np.linalg.norm(O @ (pinv(O, tol) @ V) - V))


def in_range(O, v, tol: Tolerances = DEFAULT_TOL) -> bool:
    """True when every column of ``v`` lies in the column space of ``O``."""
    v = np.asarray(v, dtype=float)
    return bool(range_residual(O, v, tol) <= tol.range_tol * max(1.0, float(np.linalg.norm(v))))


def is_invertible(O, tol: Tolerances = DEFAULT_TOL) -> bool:
    O = _as_square(O)
    if O.shape[0] == 0:
        return True
    s = np.linalg.svd(O, compute_uv=False)
    return bool(s[0] > 0 and s[-1] > tol.invert_rtol * s[0])


def penrose_residuals(M, Mp) -> tuple[float, float, float, float]:
    """Relative residuals of the four Penrose identities."""
    M = np.asarray(M, dtype=float)
    Mp = np.asarray(Mp, dtype=float)
    nM = max(np.linalg.norm(M), 1e-300)
    nP = max(np.linalg.norm(Mp), 1e-300)
    MMp = M @ Mp
    MpM = Mp @ M
    return (
        float(np.linalg.norm(MMp @ M - M) / nM),
        float(np.linalg.norm(MpM @ Mp - Mp) / nP),
        float(np.linalg.norm(MMp - MMp.T) / max(np.linalg.norm(MMp), 1e-300)),
        float(np.linalg.norm(MpM - MpM.T) / max(np.linalg.norm(MpM), 1e-300)),
    )
