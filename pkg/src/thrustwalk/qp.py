"""Dense strictly convex QP solver (Goldfarb-Idnani dual active set).

Solves ``min 1/2 x'Hx + f'x  s.t.  G x <= h`` for positive definite ``H``.
The dual method starts at the unconstrained minimizer and adds violated
constraints one at a time, so every iterate is dual feasible and the final
point is exact up to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of G, >= 0
    status: str
    iterations: int
    kkt_residual: float
    active: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residual(H, f, G, h, x, lam) -> float:
    """Max of stationarity, primal infeasibility and complementarity violations."""
    stat = H @ x + f + (G.T @ lam if G.size else 0.0)
    scale = 1.0 + np.abs(f).max(initial=0.0)
    parts = [np.abs(stat).max(initial=0.0) / scale]
    if G.size:
        slack = G @ x - h
        parts.append(max(slack.max(initial=0.0), 0.0))
        parts.append(np.abs(lam * slack).max(initial=0.0) / scale)
        parts.append(max(-lam.min(initial=0.0), 0.0))
    return float(max(parts))


def solve_dense_qp(H, f, G=None, h=None, max_iter: int | None = None, tol: float = 1e-12) -> QPResult:
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    n = f.size
    G = np.zeros((0, n)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    m = G.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + m) + 50

    chol = cho_factor(H)
    Hinv_GT = cho_solve(chol, G.T) if m else np.zeros((n, 0))
    x = -cho_solve(chol, f)
    active: list[int] = []
    u = np.zeros(0)  # multipliers of the active rows

    # normal vectors in ">=" form: n_i = -G_i, b_i = -h_i
    gnorm = np.linalg.norm(G, axis=1) if m else np.zeros(0)
    status = OPTIMAL
    it = 0
    while True:
        if m == 0:
            break
        viol = (G @ x - h) / np.maximum(gnorm, 1e-300)
        viol[active] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] <= tol * max(1.0, np.abs(h[p]) / max(gnorm[p], 1e-300)):
            break
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                status = MAX_ITER
                break
            n_p = -G[p]
            Hn = -Hinv_GT[:, p]
            if active:
                N = -G[active].T
                HN = -Hinv_GT[:, active]
                S = N.T @ HN
                r = np.linalg.solve(S, HN.T @ n_p)
                z = Hn - HN @ r
            else:
                r = np.zeros(0)
                z = Hn
            # dual step limit
            t1, k_drop = np.inf, -1
            pos = r > tol
            if np.any(pos):
                ratios = np.full(r.shape, np.inf)
                ratios[pos] = u_plus[:-1][pos] / r[pos]
                k_drop = int(np.argmin(ratios))
                t1 = ratios[k_drop]
            zn = z @ n_p
            slack_p = n_p @ x + h[p]  # = -(G_p x - h_p) < 0 when violated
            if np.linalg.norm(z) <= 1e-10 * max(np.linalg.norm(Hn), 1e-300):
                t2 = np.inf
            else:
                t2 = -slack_p / zn
            if not np.isfinite(t1) and not np.isfinite(t2):
                status = INFEASIBLE
                break
            if not np.isfinite(t2):
                u_plus = u_plus + t1 * np.append(-r, 1.0)
                u_plus = np.delete(u_plus, k_drop)
                del active[k_drop]
                continue
            t = min(t1, t2)
            x = x + t * z
            u_plus = u_plus + t * np.append(-r, 1.0)
            if t2 <= t1:
                active.append(p)
                u = u_plus
                break
            u_plus = np.delete(u_plus, k_drop)
            del active[k_drop]
        if status != OPTIMAL:
            break

    lam = np.zeros(m)
    if active and status == OPTIMAL:
        lam[active] = np.maximum(u[: len(active)], 0.0)
    elif active:
        lam[active] = np.maximum(u_plus[: len(active)], 0.0) if len(u_plus) >= len(active) else 0.0
    res = kkt_residual(H, f, G, h, x, lam)
    return QPResult(x, lam, status, it, res, tuple(active))


def projected_gradient(H, f, lb, ub, x0=None, max_iter: int = 200000, tol: float = 1e-13) -> np.ndarray:
    """Box-constrained reference solver: projected gradient with a 1/L step."""
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    L = np.linalg.eigvalsh(H).max()
    x = np.clip(np.zeros_like(f) if x0 is None else np.asarray(x0, dtype=float), lb, ub)
    for _ in range(max_iter):
        x_new = np.clip(x - (H @ x + f) / L, lb, ub)
        if np.abs(x_new - x).max() < tol:
            return x_new
        x = x_new
    return x
