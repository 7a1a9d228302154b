"""Dense convex QP solver (primal active set).

Problems have the form::

    minimize    1/2 x'Hx + q'x
    subject to  l <= A x <= u,   lb <= x <= ub

with H symmetric positive semidefinite. A feasible point is found with an
elastic phase-1 LP solved by the same active-set iteration (H = 0), which also
certifies infeasibility. Semidefinite reduced Hessians are handled by
zero-curvature descent steps along the null space.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
ITERATION_LIMIT = "IterationLimit"


class MalformedProblem(ValueError):
    pass


@dataclass
class SolverSettings:
    feas_tol: float = 1e-8
    kkt_tol: float = 1e-6
    max_iter: int | None = None  # default 50 * n (at least 50)
    check_psd: bool = True


@dataclass
class QpProblem:
    H: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    l: np.ndarray | None = None
    u: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        n = q.shape[0]
        if H.shape != (n, n):
            raise MalformedProblem(f"H has shape {H.shape}, expected ({n}, {n})")
        if self.A is None:
            A = np.zeros((0, n))
        else:
            A = np.asarray(self.A, dtype=float)
            if A.ndim == 1:
                A = A.reshape(1, -1)
        m = A.shape[0]
        if A.shape[1] != n:
            raise MalformedProblem(f"A has {A.shape[1]} columns, expected {n}")
        l = np.full(m, -np.inf) if self.l is None else np.atleast_1d(np.asarray(self.l, dtype=float))
        u = np.full(m, np.inf) if self.u is None else np.atleast_1d(np.asarray(self.u, dtype=float))
        lb = np.full(n, -np.inf) if self.lb is None else np.atleast_1d(np.asarray(self.lb, dtype=float))
        ub = np.full(n, np.inf) if self.ub is None else np.atleast_1d(np.asarray(self.ub, dtype=float))
        if l.shape != (m,) or u.shape != (m,):
            raise MalformedProblem("constraint bound vectors do not match A")
        if lb.shape != (n,) or ub.shape != (n,):
            raise MalformedProblem("variable bound vectors do not match q")
        if np.any(np.isnan(H)) or np.any(~np.isfinite(q)) or np.any(~np.isfinite(A)):
            raise MalformedProblem("problem data must be finite")
        if np.abs(H - H.T).max(initial=0.0) > 1e-9 * max(1.0, np.abs(H).max(initial=0.0)):
            raise MalformedProblem("H is not symmetric")
        if np.any(l > u) or np.any(lb > ub):
            raise MalformedProblem("lower bounds exceed upper bounds")
        self.H, self.q, self.A, self.l, self.u, self.lb, self.ub = (
            0.5 * (H + H.T), q, A, l, u, lb, ub,
        )

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.q @ x)

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        ax = self.A @ x
        v = [0.0]
        if self.m:
            v.append(np.max(self.l - ax))
            v.append(np.max(ax - self.u))
        v.append(np.max(self.lb - x))
        v.append(np.max(x - self.ub))
        return float(max(v))


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: str
    iterations: int = 0
    solve_time: float = 0.0
    # working set at termination as (row, side); rows index [A; I]
    active_set: list = field(default_factory=list)
    kkt_residual: float = float("nan")

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def solve_1d(a: float, b: float, intervals) -> float | None:
    """Minimize a*x**2 + b*x over the intersection of closed intervals.

    Returns ``None`` when the intersection is empty.
    """
    if not a > 0:
        raise ValueError("solve_1d needs a strictly convex quadratic (a > 0)")
    lo, hi = -np.inf, np.inf
    for it_lo, it_hi in intervals:
        lo = max(lo, it_lo)
        hi = min(hi, it_hi)
    if lo > hi:
        return None
    return float(min(max(-b / (2.0 * a), lo), hi))


def _svd(A: np.ndarray):
    """Full SVD of a small matrix (raw LAPACK call; numpy's wrapper dominates at this size)."""
    u, s, vt, info = lapack.dgesvd(A)
    if info != 0:
        return np.linalg.svd(A)
    return u, s, vt


def _eigh(S: np.ndarray):
    w, v, info = lapack.dsyevd(S)
    if info != 0:
        return np.linalg.eigh(S)
    return w, v


class _ActiveSet:
    """Primal active-set iteration on rows C x with bounds lo <= C x <= hi."""

    def __init__(self, H, q, C, lo, hi, feas_tol, max_iter):
        self.H, self.q, self.C, self.lo, self.hi = H, q, C, lo, hi
        self.feas_tol = feas_tol
        self.max_iter = max_iter
        self.eq = lo == hi
        self.curv_rel = 1e-11
        self.linear = not np.any(H)
        self.good_enough = None  # stop as soon as q @ x drops to this value
        self.row_scale = np.abs(C).max(axis=1)
        self.fin_lo, self.fin_hi = np.isfinite(lo), np.isfinite(hi)

    def initial_working_set(self, x, hint=()):
        """Rows tight at x, equalities first, then hinted rows, then by index."""
        C, lo, hi = self.C, self.lo, self.hi
        cx = C @ x
        tol = 10 * self.feas_tol * (1.0 + np.abs(cx))
        at_lo = np.abs(cx - lo) <= tol
        at_hi = np.abs(cx - hi) <= tol
        order = [int(i) for i in np.flatnonzero(self.eq)]
        order += [int(i) for i, _ in hint if 0 <= i < len(lo)]
        order += [int(i) for i in np.flatnonzero(at_lo | at_hi)]
        work, basis, seen = [], [], set()
        n = C.shape[1]
        for i in order:
            if i in seen:
                continue
            if self.eq[i]:
                side = 0
            elif at_lo[i]:
                side = -1
            elif at_hi[i]:
                side = 1
            else:
                continue
            seen.add(i)
            if len(basis) >= n:
                break
            # keep the row only if it is independent of the rows already kept;
            # projecting twice keeps the basis orthonormal to rounding
            r = C[i].astype(float)
            scale = math.sqrt(r @ r)
            if basis:
                B = np.array(basis)
                r = r - B.T @ (B @ r)
                r = r - B.T @ (B @ r)
            nr = math.sqrt(r @ r)
            if nr > 1e-10 * max(scale, 1e-300):
                basis.append(r / nr)
                work.append((i, side))
        return work

    def snap(self, x, work):
        """Move ``x`` by the least-norm step that makes every working row exactly tight.

        Rows count as tight within a tolerance when the working set is formed;
        without this the iterate could stay up to that tolerance off a row that
        the iteration then treats as satisfied with equality.
        """
        if not work:
            return x
        idx = [i for i, _ in work]
        target = np.array([self.lo[i] if s < 0 else self.hi[i] if s > 0 else self.lo[i] for i, s in work])
        Aw = self.C[idx]
        r = target - Aw @ x
        if not np.any(r):
            return x
        U, sv, Vt = _svd(Aw)
        return x + Vt[:len(idx)].T @ ((U.T @ r) / sv)

    def run(self, x, work):
        """Returns (x, work, status, iterations)."""
        H, q, C, lo, hi = self.H, self.q, self.C, self.lo, self.hi
        it = 0
        at_min = False  # x minimizes over the current working set
        in_work = np.zeros(len(lo), dtype=bool)
        in_work[[i for i, _ in work]] = True
        while it < self.max_iter:
            it += 1
            g = H @ x + q
            gmax = np.abs(g).max()
            k = len(work)
            if k:
                # working rows are independent, so all k singular values are nonzero;
                # row signs do not change the null space
                U, sv, Vt = _svd(C[[i for i, _ in work]])
                Z = Vt[k:].T
            else:
                Z = None

            p = None
            bounded = True
            if not at_min and (Z is None or Z.shape[1] > 0):
                gr = g if Z is None else Z.T @ g
                gscale = 1e-12 * (1.0 + gmax)
                if self.linear:
                    # every direction is flat: projected steepest descent
                    if np.abs(gr).max() > gscale:
                        pr, bounded = -gr, False
                    else:
                        pr = np.zeros_like(gr)
                else:
                    Hr = H if Z is None else Z.T @ H @ Z
                    w, V = _eigh(Hr)
                    gt = V.T @ gr
                    flat = w <= self.curv_rel * max(1.0, w[-1])
                    if flat.any() and np.abs(gt[flat]).max() > gscale:
                        pr = -(V[:, flat] @ gt[flat])
                        bounded = False
                    else:
                        pos = ~flat
                        pr = -(V[:, pos] @ (gt[pos] / w[pos]))
                p = pr if Z is None else Z @ pr
                if np.abs(p).max() <= 1e-13 * (1.0 + np.abs(x).max()):
                    p = None

            if p is None:
                if k == 0:
                    return x, work, OPTIMAL, it
                sgn = np.array([-1.0 if s < 0 else 1.0 for _, s in work])
                lam = -(U @ ((Vt[:k] @ g) / sv)) * sgn
                lam_tol = 1e-10 * (1.0 + gmax)
                worst, drop = -lam_tol, None
                for pos_, (i, s) in enumerate(work):
                    if s != 0 and lam[pos_] < worst:
                        worst, drop = lam[pos_], pos_
                if drop is None:
                    self.multipliers = lam
                    return x, work, OPTIMAL, it
                in_work[work[drop][0]] = False
                del work[drop]
                at_min = False
                continue

            # ratio test over rows not in the working set
            cp = C @ p
            cx = C @ x
            ptol = 1e-12 * np.abs(p).max() * self.row_scale
            cand = ~in_work
            if Z is not None:
                # rows in the span of the working set have C p = 0 exactly; rounding must not let them block
                cand &= np.abs(C @ Z).max(axis=1, initial=0.0) > 1e-9 * self.row_scale
            up = (cp > ptol) & self.fin_hi & cand
            dn = (cp < -ptol) & self.fin_lo & cand
            steps = np.full(len(lo), np.inf)
            steps[up] = (hi[up] - cx[up]) / cp[up]
            steps[dn] = (lo[dn] - cx[dn]) / cp[dn]
            np.maximum(steps, 0.0, out=steps)
            alpha = 1.0 if bounded else np.inf
            block = None
            if steps.size:
                j = int(steps.argmin())  # argmin returns the lowest index on ties
                if steps[j] < alpha:
                    alpha, block = float(steps[j]), j
            if alpha == np.inf:
                raise MalformedProblem("QP is unbounded below")
            x = x + alpha * p
            if self.good_enough is not None and q @ x <= self.good_enough:
                return x, work, OPTIMAL, it
            at_min = block is None
            if block is not None:
                if self.eq[block]:
                    side = 0
                else:
                    side = 1 if cp[block] > 0 else -1
                work.append((block, side))
                in_work[block] = True
        return x, work, ITERATION_LIMIT, it


def _check_psd(H):
    if H.size == 0:
        return
    d = np.diag(H)
    if np.count_nonzero(H) == np.count_nonzero(d):
        # diagonal: the eigenvalues are the diagonal entries
        if d.min() < -1e-8 * max(np.abs(d).max(), 1e-300):
            raise MalformedProblem(f"H is not positive semidefinite (min eigenvalue {d.min():.3g})")
        return
    ev = np.linalg.eigvalsh(H)
    norm = max(np.abs(ev).max(), 0.0)
    if ev[0] < -1e-8 * max(norm, 1e-300):
        raise MalformedProblem(f"H is not positive semidefinite (min eigenvalue {ev[0]:.3g})")


def solve(problem: QpProblem, settings: SolverSettings | None = None, *, x0=None, active_set=()) -> QpSolution:
    """Solve a convex QP.

    ``x0`` and ``active_set`` (rows of ``[A; I]`` with sides, as returned in
    ``QpSolution.active_set``) are optional warm-start hints; the result does
    not depend on them beyond tie-breaking among equal minimizers.
    """
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    P = problem
    if settings.check_psd:
        _check_psd(P.H)
    n, m = P.n, P.m
    max_iter = settings.max_iter or max(50, 50 * n)

    # eliminate fixed variables
    fixed = P.lb == P.ub
    free = ~fixed
    xf = np.where(fixed, P.lb, 0.0)
    nf = int(free.sum())
    x_full = xf.copy()
    if nf == 0:
        viol = P.max_violation(xf)
        status = OPTIMAL if viol <= settings.feas_tol else INFEASIBLE
        return QpSolution(xf, P.objective(xf), status, 0, time.perf_counter() - t0)

    H = P.H[np.ix_(free, free)]
    q = P.q[free] + P.H[np.ix_(free, fixed)] @ xf[fixed]
    Af = P.A[:, free]
    shift = P.A[:, fixed] @ xf[fixed] if m else np.zeros(0)
    C = np.vstack([Af, np.eye(nf)])
    lo = np.concatenate([P.l - shift, P.lb[free]])
    hi = np.concatenate([P.u - shift, P.ub[free]])
    # map full-row indices [A; I_n] <-> reduced rows [A; I_nf]
    free_idx = np.flatnonzero(free)
    full_of_red = np.concatenate([np.arange(m), m + free_idx])
    red_of_full = {int(f): r for r, f in enumerate(full_of_red)}
    hint = [(red_of_full[i], s) for i, s in active_set if i in red_of_full]

    ftol = settings.feas_tol
    if x0 is None:
        x = np.zeros(nf)
    else:
        x = np.asarray(x0, dtype=float)[free].copy()
    x = np.clip(x, lo[m:], hi[m:])

    iters = 0
    cx = C[:m] @ x
    viol = max(0.0, float(np.max(lo[:m] - cx, initial=0.0)), float(np.max(cx - hi[:m], initial=0.0)))
    if viol > ftol:
        x, viol, it1, st1 = _phase1(C, lo, hi, m, x, viol, ftol, max_iter)
        iters += it1
        if st1 == ITERATION_LIMIT:
            x_full[free] = x
            return QpSolution(x_full, P.objective(x_full), ITERATION_LIMIT, iters, time.perf_counter() - t0)
        if viol > ftol:
            x_full[free] = x
            return QpSolution(x_full, P.objective(x_full), INFEASIBLE, iters, time.perf_counter() - t0)

    solver = _ActiveSet(H, q, C, lo, hi, ftol, max_iter)
    work = solver.initial_working_set(x, hint)
    x = solver.snap(x, work)
    x, work, status, it2 = solver.run(x, work)
    iters += it2
    x_full[free] = x
    x_full = np.clip(x_full, P.lb, P.ub)
    kkt = float("nan")
    if status == OPTIMAL:
        g = H @ x + q
        if work:
            idx = [i for i, _ in work]
            sgn = np.array([1.0 if s >= 0 else -1.0 for _, s in work])
            lam = getattr(solver, "multipliers", np.zeros(len(work)))
            r = g + (C[idx] * sgn[:, None]).T @ lam
        else:
            r = g
        kkt = float(np.abs(r).max(initial=0.0))
    out_work = [(int(full_of_red[i]), s) for i, s in work]
    return QpSolution(x_full, P.objective(x_full), status, iters, time.perf_counter() - t0, out_work, kkt)


def _phase1(C, lo, hi, m, x, viol, ftol, max_iter):
    """Minimize the largest general-row violation t over the variable box."""
    n = C.shape[1]
    # each general row becomes C x - t <= hi and/or C x + t >= lo
    up, dn = np.isfinite(hi[:m]), np.isfinite(lo[:m])
    G = np.vstack([
        np.hstack([C[:m][up], -np.ones((int(up.sum()), 1))]),
        np.hstack([C[:m][dn], np.ones((int(dn.sum()), 1))]),
        np.eye(n + 1),
    ])
    glo = np.concatenate([np.full(int(up.sum()), -np.inf), lo[:m][dn], lo[m:], [0.0]])
    ghi = np.concatenate([hi[:m][up], np.full(int(dn.sum()), np.inf), hi[m:], [np.inf]])
    Hp = np.zeros((n + 1, n + 1))
    qp = np.zeros(n + 1)
    qp[-1] = 1.0
    z = np.append(x, viol)
    solver = _ActiveSet(Hp, qp, G, glo, ghi, ftol, max_iter)
    solver.good_enough = ftol  # any point with t <= ftol is feasible enough
    work = solver.initial_working_set(z)
    z = solver.snap(z, work)
    z, work, status, it = solver.run(z, work)
    x = z[:n]
    cx = C[:m] @ x
    v = max(0.0, float(np.max(lo[:m] - cx, initial=0.0)), float(np.max(cx - hi[:m], initial=0.0)))
    return x, v, it, status
