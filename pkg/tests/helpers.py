import numpy as np

from mixedlq.model import make_problem


def _sym(rng, n, scale):
    M = rng.standard_normal((n, n)) * scale
    return (M + M.T) / 2


def _gram(rng, n, scale=1.0, shift=0.0):
    M = rng.standard_normal((n, n)) * scale
    return M @ M.T + shift * np.eye(n)


def random_spec(rng, n=None, m=None, N=None, p=1, mean_field=True, affine=True, scale=0.4):
    """Fully general random problem; every family depends on (t, k)."""
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 4))
    N = N or int(rng.integers(1, 5))
    r = lambda *shape: rng.standard_normal((N, N) + shape) * scale  # noqa: E731
    fam = {
        "A": r(n, n) + np.eye(n) * 0.5, "B": r(n, m), "C": r(p, n, n), "D": r(p, n, m),
        "Q": np.array([[_sym(rng, n, 1.0) for _ in range(N)] for _ in range(N)]),
        "R": np.array([[_sym(rng, m, 1.0) + 2 * np.eye(m) for _ in range(N)] for _ in range(N)]),
        "G": np.array([_sym(rng, n, 1.0) for _ in range(N)]),
    }
    if mean_field:
        fam.update(
            Abar=r(n, n), Bbar=r(n, m), Cbar=r(p, n, n), Dbar=r(p, n, m),
            Qbar=np.array([[_sym(rng, n, scale) for _ in range(N)] for _ in range(N)]),
            Rbar=np.array([[_sym(rng, m, scale) for _ in range(N)] for _ in range(N)]),
            Gbar=np.array([_sym(rng, n, scale) for _ in range(N)]),
            F=rng.standard_normal((N, n, n)) * scale,
        )
    if affine:
        fam.update(
            f=r(n), d=r(p, n), q=r(n), rho=r(m), g=rng.standard_normal((N, n)) * scale,
        )
    fam["delta"] = np.array([_gram(rng, p, 0.7, 0.2) for _ in range(N)])
    return make_problem(n, m, p, N, **fam)


def h_spec(rng, n=None, m=None, N=None, p=1, scale=0.5):
    """Random problem satisfying the sign conditions: Q, Q+Qbar, G, G+Gbar PSD; R, R+Rbar PD."""
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 4))
    N = N or int(rng.integers(1, 6))
    r = lambda *shape: rng.standard_normal((N, N) + shape) * scale  # noqa: E731
    pairs = lambda fn: np.array([[fn() for _ in range(N)] for _ in range(N)])  # noqa: E731
    Q = pairs(lambda: _gram(rng, n))
    R = pairs(lambda: _gram(rng, m, 1.0, 0.1))
    # barred weights bounded below by minus a fraction of the unbarred ones
    Qbar = pairs(lambda: _gram(rng, n, 0.5)) - 0.5 * Q
    Rbar = pairs(lambda: _gram(rng, m, 0.5)) - 0.5 * R
    G = np.array([_gram(rng, n) for _ in range(N)])
    Gbar = np.array([_gram(rng, n, 0.5) for _ in range(N)]) - 0.5 * G
    return make_problem(
        n, m, p, N,
        A=r(n, n) + np.eye(n), B=r(n, m), C=r(p, n, n), D=r(p, n, m),
        Abar=r(n, n), Bbar=r(n, m), Cbar=r(p, n, n), Dbar=r(p, n, m),
        Q=Q, Qbar=Qbar, R=R, Rbar=Rbar, G=G, Gbar=Gbar,
        delta=np.array([_gram(rng, p, 0.7, 0.2) for _ in range(N)]),
    )


def random_gains(rng, spec, scale=0.5):
    return rng.standard_normal((spec.N, spec.m, spec.n)) * scale
