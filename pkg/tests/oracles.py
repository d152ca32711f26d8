"""Independent reference computations shared by the unit and acceptance tests.

Nothing here calls into the package's numerical routines; each oracle is
written from the defining formula with dense numpy.
"""

import numpy as np

from texalign.features import MatchSet


def skew(w):
    a, b, g = w
    return np.array([[0.0, -g, b], [g, 0.0, -a], [-b, a, 0.0]])


def T_of(omega):
    """Homogeneous correction: linear part I + skew(alpha, beta, gamma)."""
    T = np.eye(4)
    T[:3, :3] += skew(omega[:3])
    T[:3, 3] = omega[3:]
    return T


def rodrigues(rotvec):
    th = np.linalg.norm(rotvec)
    if th == 0:
        return np.eye(3)
    k = skew(np.asarray(rotvec) / th)
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * k @ k


def dense_system(Pi, Pj, mu, fi, fj, F):
    """Rows 3k..3k+2: +mu A(P_i) at i's columns, -mu A(P_j) at j's; b = mu (P_j - P_i).

    A(P) omega is taken as the displacement (T(omega) P~ - P~)[:3], so its
    columns are read off by applying T to unit vectors of omega.
    """
    K = len(mu)
    A = np.zeros((3 * K, 6 * F))
    b = np.zeros(3 * K)
    for k in range(K):
        for m in range(6):
            e = np.zeros(6)
            e[m] = 1.0
            di = (T_of(e) @ np.r_[Pi[k], 1.0])[:3] - Pi[k] if m < 3 else e[3:]
            dj = (T_of(e) @ np.r_[Pj[k], 1.0])[:3] - Pj[k] if m < 3 else e[3:]
            A[3 * k:3 * k + 3, 6 * fi[k] + m] += mu[k] * di
            A[3 * k:3 * k + 3, 6 * fj[k] + m] -= mu[k] * dj
        b[3 * k:3 * k + 3] = mu[k] * (Pj[k] - Pi[k])
    return A, b


def dense_ridge(A, b, lam):
    """Minimiser of |A x - b|^2 + lam |x|^2 via an SVD of the stacked system."""
    n = A.shape[1]
    M = np.vstack([A, np.sqrt(lam) * np.eye(n)])
    rhs = np.concatenate([b, np.zeros(n)])
    return np.linalg.lstsq(M, rhs, rcond=None)[0]


def random_matches(rng, F, K, spread=1.0, noise=0.05):
    """K matches over F fragments; every fragment pair drawn at random, i != j."""
    fi = rng.integers(0, F, K)
    fj = (fi + rng.integers(1, F, K)) % F
    Pi = rng.uniform(-spread, spread, (K, 3))
    Pj = Pi + noise * rng.normal(size=(K, 3))
    mu = rng.uniform(0.05, 1.0, K)
    return MatchSet(Pi, Pj, mu, np.stack([fi, fj], 1)), (Pi, Pj, mu, fi, fj)


def sorted_by_pair(m: MatchSet):
    order = np.lexsort((np.arange(len(m)), m.fragments[:, 1], m.fragments[:, 0]))
    return (m.p_i[order], m.p_j[order], m.mu[order], m.fragments[order, 0],
            m.fragments[order, 1])


def offset_matches(d, n=30, seed=0):
    """Two fragments whose matches differ by (d, 0, 0); points non-collinear."""
    rng = np.random.default_rng(seed)
    Pi = rng.uniform(-1, 1, (n, 3))
    Pj = Pi + [d, 0.0, 0.0]
    return MatchSet(Pi, Pj, np.ones(n), np.tile([0, 1], (n, 1)))
