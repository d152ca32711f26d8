"""Global rigid correction of texture fragments.

Every fragment ``i`` gets a small-motion vector ``omega_i = (alpha, beta,
gamma, tx, ty, tz)`` whose linearised transform moves a point ``p`` to
``p + r x p + t``.  A correspondence ``(P_i, P_j, mu)`` between fragments
``i`` and ``j`` asks the corrected points to coincide, contributing three
rows ``mu * A(P_i)`` / ``-mu * A(P_j)`` with right-hand side
``mu * (P_j - P_i)``.  All rows are stacked into one sparse system and
solved once as ridge-regularised least squares; there is no iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .features import MatchSet


class GaugeDeficiencyError(ValueError):
    """Raised for ``lambda2 = 0`` when the system leaves a global motion undetermined."""


def build_A_k(P) -> np.ndarray:
    x, y, z = np.asarray(P, dtype=np.float64).reshape(3)
    return np.array([[0.0, z, -y, 1.0, 0.0, 0.0],
                     [-z, 0.0, x, 0.0, 1.0, 0.0],
                     [y, -x, 0.0, 0.0, 0.0, 1.0]])


def build_A_batch(P) -> np.ndarray:
    """Stacked :func:`build_A_k`, shape (n, 3, 6)."""
    P = np.reshape(np.asarray(P, dtype=np.float64), (-1, 3))
    n = len(P)
    A = np.zeros((n, 3, 6))
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    A[:, 0, 1], A[:, 0, 2] = z, -y
    A[:, 1, 0], A[:, 1, 2] = -z, x
    A[:, 2, 0], A[:, 2, 1] = y, -x
    A[:, 0, 3] = A[:, 1, 4] = A[:, 2, 5] = 1.0
    return A


def correction_matrix(omega) -> np.ndarray:
    a, b, g, tx, ty, tz = np.asarray(omega, dtype=np.float64).reshape(6)
    return np.array([[1.0, -g, b, tx],
                     [g, 1.0, -a, ty],
                     [-b, a, 1.0, tz],
                     [0.0, 0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class SparseSystem:
    A: sp.csr_matrix
    b: np.ndarray
    fragment_ids: np.ndarray

    @property
    def n_matches(self) -> int:
        return self.A.shape[0] // 3

    @property
    def n_fragments(self) -> int:
        return len(self.fragment_ids)

    def triplets(self):
        c = self.A.tocoo()
        return c.row, c.col, c.data


@dataclass(frozen=True, eq=False)
class Solution:
    omega: np.ndarray
    fragment_ids: np.ndarray
    residual_norm: float
    lambda2: float

    def __post_init__(self):
        object.__setattr__(self, "_col", {int(f): k for k, f in enumerate(self.fragment_ids)})

    @classmethod
    def zeros(cls, fragment_ids) -> "Solution":
        ids = np.asarray(fragment_ids, dtype=np.int64)
        return cls(np.zeros((len(ids), 6)), ids, 0.0, 0.0)

    def vector(self, frag: int) -> np.ndarray:
        return self.omega[self._col[int(frag)]]

    def matrix(self, frag: int) -> np.ndarray:
        return correction_matrix(self.vector(frag))

    @property
    def flat(self) -> np.ndarray:
        return self.omega.reshape(-1)


def assemble_system(matches: MatchSet, fragment_ids) -> SparseSystem:
    """Stack the weighted match constraints into ``A_pose``, ``b_pose``.

    Matches are ordered by fragment pair (stable within a pair) before
    assembly, so row order is independent of how the match list was built.
    """
    ids = np.asarray(fragment_ids, dtype=np.int64)
    col = {int(f): k for k, f in enumerate(ids)}
    K = len(matches)
    F = len(ids)
    if K == 0:
        return SparseSystem(sp.csr_matrix((0, 6 * F)), np.zeros(0), ids)
    fr = matches.fragments
    try:
        ci = np.array([col[int(f)] for f in fr[:, 0]], dtype=np.int64)
        cj = np.array([col[int(f)] for f in fr[:, 1]], dtype=np.int64)
    except KeyError as e:
        raise KeyError(f"match references unknown fragment {e.args[0]}") from None
    if np.any(ci == cj):
        raise ValueError("a match must connect two distinct fragments")
    order = np.lexsort((np.arange(K), fr[:, 1], fr[:, 0]))
    mu = matches.mu[order]
    Pi, Pj = matches.p_i[order], matches.p_j[order]
    ci, cj = ci[order], cj[order]

    Ai = mu[:, None, None] * build_A_batch(Pi)
    Aj = -mu[:, None, None] * build_A_batch(Pj)
    rows = (3 * np.arange(K))[:, None, None] + np.arange(3)[None, :, None]
    rows = np.broadcast_to(rows, (K, 3, 6))
    cols_i = np.broadcast_to((6 * ci)[:, None, None] + np.arange(6)[None, None, :], (K, 3, 6))
    cols_j = np.broadcast_to((6 * cj)[:, None, None] + np.arange(6)[None, None, :], (K, 3, 6))
    r = np.concatenate([rows.ravel(), rows.ravel()])
    c = np.concatenate([cols_i.ravel(), cols_j.ravel()])
    v = np.concatenate([Ai.ravel(), Aj.ravel()])
    nz = v != 0
    A = sp.csr_matrix((v[nz], (r[nz], c[nz])), shape=(3 * K, 6 * F))
    b = (mu[:, None] * (Pj - Pi)).ravel()
    return SparseSystem(A, b, ids)


def default_lambda2(matches: MatchSet, n_fragments: int) -> float:
    """Ridge weight scaled by mean squared weight and rows per unknown."""
    K = len(matches)
    if K == 0 or n_fragments == 0:
        return 1e-3
    return 1e-3 * float(np.mean(matches.mu ** 2)) * K / (6.0 * n_fragments)


def _rank_deficient(A: sp.spmatrix) -> tuple[bool, int]:
    n = A.shape[1]
    if A.shape[0] < n:
        return True, A.shape[0]
    M = (A.T @ A).toarray() if sp.issparse(A) else A.T @ A
    w = np.linalg.eigvalsh(M)
    tol = max(w.max(), 1.0) * n * 1e-12
    rank = int(np.count_nonzero(w > tol))
    return rank < n, rank


def solve_corrections(system: SparseSystem, lambda2: float, method: str = "cholesky",
                      robust: bool = False, huber_delta: float | None = None) -> Solution:
    """Minimise ``|A omega - b|^2 + lambda2 |omega|^2``.

    ``method='cholesky'`` factorises the sparse normal equations (SuperLU on
    the SPD matrix); ``method='qr'`` runs a dense QR on the stacked system
    ``[A; sqrt(lambda2) I]`` and is meant for small problems and checks.

    ``robust=True`` adds one Huber reweighting round on the per-match
    residual norms.
    """
    if lambda2 < 0:
        raise ValueError("lambda2 must be >= 0")
    A, b = system.A.tocsr(), system.b
    n = A.shape[1]
    if n == 0:
        return Solution(np.zeros((0, 6)), system.fragment_ids, 0.0, lambda2)
    if lambda2 == 0:
        bad, rank = _rank_deficient(A)
        if bad:
            raise GaugeDeficiencyError(
                f"A_pose has rank {rank} < {n} unknowns: a global motion of the fragments "
                "is unconstrained (gauge freedom); use lambda2 > 0")

    omega = _solve(A, b, lambda2, method)
    if robust and A.shape[0]:
        r = (A @ omega - b).reshape(-1, 3)
        rn = np.linalg.norm(r, axis=1)
        delta = huber_delta if huber_delta is not None else 1.345 * max(np.median(rn) / 0.6745, 1e-12)
        w = np.where(rn <= delta, 1.0, delta / np.maximum(rn, 1e-300))
        W = sp.diags(np.repeat(np.sqrt(w), 3))
        omega = _solve(W @ A, W @ b, lambda2, method)
    res = float(np.linalg.norm(A @ omega - b))
    return Solution(omega.reshape(-1, 6), system.fragment_ids, res, lambda2)


def _solve(A, b, lambda2, method):
    n = A.shape[1]
    if method == "cholesky":
        N = (A.T @ A + lambda2 * sp.identity(n, format="csr")).tocsc()
        rhs = A.T @ b
        if N.nnz == 0:
            return np.zeros(n)
        return splu(N, permc_spec="MMD_AT_PLUS_A").solve(rhs)
    if method == "qr":
        M = np.vstack([A.toarray(), np.sqrt(lambda2) * np.eye(n)])
        rhs = np.concatenate([b, np.zeros(n)])
        Q, R = scipy.linalg.qr(M, mode="economic")
        return scipy.linalg.solve_triangular(R, Q.T @ rhs)
    raise ValueError(f"unknown method {method!r}")


def objective(system: SparseSystem, omega, lambda2: float) -> float:
    w = np.reshape(omega, -1)
    r = system.A @ w - system.b
    return float(r @ r + lambda2 * w @ w)


def corrected_points(points, frag: int, sol: Solution) -> np.ndarray:
    """Apply fragment ``frag``'s correction ``T_i`` to (n, 3) points."""
    P = np.reshape(np.asarray(points, dtype=np.float64), (-1, 3))
    w = sol.vector(frag)
    return P + np.cross(w[:3], P) + w[3:]


def source_points(points, frag: int, sol: Solution) -> np.ndarray:
    """Inverse of :func:`corrected_points`: where fragment ``frag``'s keyframe saw
    the content that its correction carries onto ``points``.

    Texture lookups project these, not the corrected points.
    """
    P = np.reshape(np.asarray(points, dtype=np.float64), (-1, 3))
    T = correction_matrix(sol.vector(frag))
    return np.linalg.solve(T[:3, :3], (P - T[:3, 3]).T).T


def corrected_point(p, frag: int, sol: Solution) -> np.ndarray:
    return corrected_points(p, frag, sol)[0]


def corrected_matches(matches: MatchSet, sol: Solution) -> tuple[np.ndarray, np.ndarray]:
    """Both ends of every match after applying their fragments' corrections."""
    col = {int(f): k for k, f in enumerate(sol.fragment_ids)}
    ci = np.array([col[int(f)] for f in matches.fragments[:, 0]], dtype=np.int64)
    cj = np.array([col[int(f)] for f in matches.fragments[:, 1]], dtype=np.int64)
    wi, wj = sol.omega[ci], sol.omega[cj]
    qi = matches.p_i + np.cross(wi[:, :3], matches.p_i) + wi[:, 3:]
    qj = matches.p_j + np.cross(wj[:, :3], matches.p_j) + wj[:, 3:]
    return qi, qj
