"""Dense strictly convex QP solver (Goldfarb-Idnani dual active set).

Solves  min 0.5 x'Hx + f'x  s.t.  C x >= b.

The method starts from the unconstrained minimum and adds violated
constraints one at a time, dropping active ones whose multipliers would go
negative. It is exact up to round-off, deterministic, and reports KKT
residuals. The factorization of the active set is recomputed from scratch
whenever the set changes, which is cheap for the small problems here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"


class QPError(RuntimeError):
    pass


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    status: str
    active: List[int]
    multipliers: np.ndarray
    iterations: int
    kkt: Dict[str, float] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(H, f, C, b, x, lam) -> Dict[str, float]:
    s = C @ x - b if C.size else np.zeros(0)
    grad = H @ x + f - (C.T @ lam if C.size else 0.0)
    return {
        "stationarity": float(np.max(np.abs(grad))) if grad.size else 0.0,
        "primal": float(max(0.0, -s.min())) if s.size else 0.0,
        "dual": float(max(0.0, -lam.min())) if lam.size else 0.0,
        "complementarity": float(np.max(np.abs(lam * s))) if s.size else 0.0,
    }


def solve_qp(
    H: np.ndarray,
    f: np.ndarray,
    C: Optional[np.ndarray] = None,
    b: Optional[np.ndarray] = None,
    L: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: Optional[int] = None,
) -> QPResult:
    """Solve the QP; ``L`` is an optional precomputed Cholesky factor of H."""
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    n = f.size
    C = np.zeros((0, n)) if C is None else np.asarray(C, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    m = C.shape[0]
    if L is None:
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise QPError("Hessian is not positive definite") from None
    Linv = np.linalg.solve(L, np.eye(n))
    J0 = Linv.T  # J0 J0' = H^-1

    x = -J0 @ (J0.T @ f)
    active: List[int] = []
    u = np.zeros(0)
    max_iter = max_iter if max_iter is not None else 10 * (n + m) + 50
    scale = 1.0 + np.abs(C).sum(axis=1) if m else np.ones(0)

    def factor(act):
        if not act:
            return J0, None, None
        B = Linv @ C[act].T
        Q, R = np.linalg.qr(B, mode="complete")
        J = J0 @ Q
        return J, R[: len(act), : len(act)], len(act)

    J, R, q = factor(active)
    it = 0
    while True:
        s = C @ x - b if m else np.zeros(0)
        viol = s / scale
        if m == 0 or viol.min() >= -tol:
            lam = np.zeros(m)
            lam[active] = u
            res = QPResult(x, float(0.5 * x @ H @ x + f @ x), OPTIMAL, sorted(active), lam, it)
            res.kkt = kkt_residuals(H, f, C, b, x, lam)
            return res
        p = int(np.argmin(viol))
        np_ = C[p]
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                raise QPError(f"no convergence in {max_iter} iterations")
            k = 0 if q is None else q
            d = J.T @ np_
            z = J[:, k:] @ d[k:]
            r = np.linalg.solve(R, d[:k]) if k else np.zeros(0)
            # dual step length: largest t keeping active multipliers >= 0
            t1, l = np.inf, -1
            for j in range(k):
                if r[j] > tol:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, l = ratio, j
            zn = z @ np_
            t2 = np.inf if np.linalg.norm(z) <= tol * (1 + np.linalg.norm(np_)) or zn <= tol else -(np_ @ x - b[p]) / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                lam = np.zeros(m)
                lam[active] = u_plus[:-1]
                res = QPResult(x, float(0.5 * x @ H @ x + f @ x), INFEASIBLE, sorted(active), lam, it)
                res.kkt = kkt_residuals(H, f, C, b, x, lam)
                return res
            if np.isfinite(t2):
                x = x + t * z
            u_plus = u_plus + t * np.append(-r, 1.0)
            if t == t2:
                active.append(p)
                u = u_plus
                J, R, q = factor(active)
                break
            # partial step: drop the blocking constraint and retry p
            del active[l]
            u_plus = np.delete(u_plus, l)
            J, R, q = factor(active)
