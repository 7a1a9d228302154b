"""Stage 2: hand contact force and contact selection.

For a fixed contact the hand force realizing a ZMP shift lies on a line
parametrized by its vertical component, so the exact problem (QP1) is a
one-dimensional QP over an interval. QP2 adds a bounded tolerance ``S_z`` on the
shift; the product ``S_z * f_z`` is replaced by ``W`` under a McCormick envelope.
Contact selection enumerates the one-hot choice of contact exactly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import ContactPoint, LipmState, WorldParams, delta_z, force_line_coeffs
from .qp import QpProblem, SolverSettings, solve, solve_1d

DERIVED, PRINTED = "derived", "printed"


class NoContactFeasible(RuntimeError):
    """No candidate contact can realize every requested shift.

    ``diagnostics`` maps contact id to the first infeasible step index.
    """

    def __init__(self, diagnostics: dict):
        self.diagnostics = dict(diagnostics)
        super().__init__(f"no feasible hand contact (first infeasible step per contact: {self.diagnostics})")


@dataclass
class ContactSettings:
    kappa: float = 0.1
    s_z_bounds: tuple = (0.02, 0.02)  # box half-widths (x, y) [m]
    f_z_bounds: tuple | None = None  # default (0, 0.5 m g)
    # sign of the S_z * f_z term in the relaxed force equation
    bilinear_sign: str = DERIVED
    world: WorldParams = field(default_factory=WorldParams)
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        if min(self.s_z_bounds) < 0:
            raise ValueError("s_z_bounds are half-widths and must be >= 0")
        if self.bilinear_sign not in (DERIVED, PRINTED):
            raise ValueError(f"bilinear_sign must be {DERIVED!r} or {PRINTED!r}")
        lo, hi = self.resolved_f_z_bounds
        if not lo <= hi or hi >= self.world.weight - self.world.eps_den:
            raise ValueError("f_z bounds must satisfy f_L <= f_U < m g")

    @property
    def resolved_f_z_bounds(self) -> tuple:
        if self.f_z_bounds is None:
            return (0.0, 0.5 * self.world.weight)
        return tuple(float(v) for v in self.f_z_bounds)


@dataclass
class ForceStepProblem:
    state: LipmState
    delta_z: np.ndarray
    contact: ContactPoint
    settings: ContactSettings = field(default_factory=ContactSettings)

    def __post_init__(self):
        self.delta_z = np.asarray(self.delta_z, dtype=float).reshape(2)


@dataclass
class ForceResult:
    feasible: bool
    force: np.ndarray | None = None
    f_z: float = float("nan")
    s_z: np.ndarray = field(default_factory=lambda: np.zeros(2))
    w: np.ndarray = field(default_factory=lambda: np.zeros(2))
    objective: float = float("inf")
    bilinear_violation: float = 0.0  # [N]
    realized_shift: np.ndarray | None = None
    solve_time: float = 0.0
    active_set: list = field(default_factory=list)  # solver working set, reusable as a warm start


def _cone_rows(R: np.ndarray, mu: float) -> np.ndarray:
    """Rows G with G @ (f_b, f_t, f_n) <= h describe the linearized cone."""
    return np.array([
        [1.0, 0.0, -mu],
        [-1.0, 0.0, -mu],
        [0.0, 1.0, -mu],
        [0.0, -1.0, -mu],
        [0.0, 0.0, -1.0],
        [0.0, 0.0, 1.0],
    ]) @ R


def _cone_rhs(f_n_max: float) -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 0.0, 0.0, f_n_max])


def _weights(kappa: float) -> np.ndarray:
    return np.array([1.0, 1.0, kappa])


def force_cost(force, contact: ContactPoint, kappa: float) -> float:
    fl = contact.rotation @ np.asarray(force, dtype=float)
    return float(fl[0] ** 2 + fl[1] ** 2 + kappa * fl[2] ** 2)


def _finish(problem: ForceStepProblem, force, f_z, s_z, w, t0) -> ForceResult:
    st = problem.settings
    world = st.world
    pz = problem.contact.p[2]
    viol = float(np.max(np.abs(w - s_z * f_z)) / abs(pz))
    return ForceResult(
        True, force, float(f_z), s_z, w,
        force_cost(force, problem.contact, st.kappa), viol,
        delta_z(problem.state, force, problem.contact.p, world),
        time.perf_counter() - t0,
    )


def solve_qp1(problem: ForceStepProblem) -> ForceResult:
    """Cheapest cone-feasible hand force realizing the shift exactly."""
    t0 = time.perf_counter()
    st, c = problem.settings, problem.contact
    slope, offset = force_line_coeffs(problem.state, c.p, problem.delta_z, st.world)
    d = np.array([slope[0], slope[1], 1.0])
    f0 = np.array([offset[0], offset[1], 0.0])
    u, v = c.rotation @ d, c.rotation @ f0
    wts = _weights(st.kappa)
    a = float(wts @ (u * u))
    b = float(2 * wts @ (u * v))
    G = _cone_rows(c.rotation, c.mu)
    alpha = G @ d
    beta = G @ f0 - _cone_rhs(c.f_n_max)
    tol = st.solver.feas_tol
    intervals = [st.resolved_f_z_bounds]
    for al, be in zip(alpha, beta):
        if abs(al) <= 1e-14 * (1.0 + abs(be)):
            if be > tol:
                return ForceResult(False, solve_time=time.perf_counter() - t0)
        elif al > 0:
            intervals.append((-np.inf, (tol - be) / al))
        else:
            intervals.append(((tol - be) / al, np.inf))
    f_z = solve_1d(a, b, intervals)
    if f_z is None:
        return ForceResult(False, solve_time=time.perf_counter() - t0)
    return _finish(problem, d * f_z + f0, f_z, np.zeros(2), np.zeros(2), t0)


def qp2_problem(problem: ForceStepProblem):
    """Relaxed force QP over v = (f_z, S_x, S_y, W_x, W_y).

    Returns ``(QpProblem, M, f0, const)`` where the world force is ``M v + f0``
    and ``const`` is the cost offset dropped from the QP objective.
    """
    st, c = problem.settings, problem.contact
    world = st.world
    pz = c.p[2]
    slope, offset = force_line_coeffs(problem.state, c.p, problem.delta_z, world)
    sign = -1.0 if st.bilinear_sign == DERIVED else 1.0
    k = world.weight / pz
    M = np.array([
        [slope[0], k, 0.0, sign / pz, 0.0],
        [slope[1], 0.0, k, 0.0, sign / pz],
        [1.0, 0.0, 0.0, 0.0, 0.0],
    ])
    f0 = np.array([offset[0], offset[1], 0.0])
    U = c.rotation @ M
    v0 = c.rotation @ f0
    D = _weights(st.kappa)
    H = 2 * U.T @ (D[:, None] * U)
    q = 2 * U.T @ (D * v0)
    const = float(v0 @ (D * v0))
    G = _cone_rows(c.rotation, c.mu)
    A_cone = G @ M
    u_cone = _cone_rhs(c.f_n_max) - G @ f0
    fl, fu = st.resolved_f_z_bounds
    rows, rhs = [], []
    for axis in range(2):
        s_lo, s_hi = -st.s_z_bounds[axis], st.s_z_bounds[axis]
        si, wi = 1 + axis, 3 + axis
        for cf, cs, cw, r in (
            (s_lo, fl, -1.0, s_lo * fl),
            (s_hi, fu, -1.0, s_hi * fu),
            (-s_hi, -fl, 1.0, -s_hi * fl),
            (-s_lo, -fu, 1.0, -s_lo * fu),
        ):
            row = np.zeros(5)
            row[0], row[si], row[wi] = cf, cs, cw
            rows.append(row)
            rhs.append(r)
    A = np.vstack([A_cone, np.array(rows)])
    u = np.concatenate([u_cone, rhs])
    lb = np.array([fl, -st.s_z_bounds[0], -st.s_z_bounds[1], -np.inf, -np.inf])
    ub = np.array([fu, st.s_z_bounds[0], st.s_z_bounds[1], np.inf, np.inf])
    qp = QpProblem(H, q, A, None, u, lb, ub)
    return qp, M, f0, const


def solve_qp2(problem: ForceStepProblem, *, warm=(), start: ForceResult | None = None) -> ForceResult:
    """Cheapest cone-feasible force realizing the shift up to the S_z tolerance.

    ``start`` is an optional starting point from an earlier feasible result: a
    QP1 result for the same problem (feasible here, so the feasibility phase is
    skipped) or the QP2 result of a neighbouring problem. The optimum does not
    depend on it beyond tie-breaking.
    """
    t0 = time.perf_counter()
    qp, M, f0, _ = qp2_problem(problem)
    x0 = None
    if start is not None and start.feasible:
        x0 = np.concatenate([[start.f_z], start.s_z, start.w])
    sol = solve(qp, problem.settings.solver, x0=x0, active_set=warm)
    if not sol.optimal:
        return ForceResult(False, solve_time=time.perf_counter() - t0)
    v = sol.x
    res = _finish(problem, M @ v + f0, v[0], v[1:3].copy(), v[3:5].copy(), t0)
    res.active_set = sol.active_set
    return res


def mccormick_gap_bound(settings: ContactSettings, p_z: float) -> float:
    """Largest possible |W - S_z f_z| / p_z inside the envelope [N]."""
    fl, fu = settings.resolved_f_z_bounds
    return float(max(2 * s for s in settings.s_z_bounds) * (fu - fl) / (4 * abs(p_z)))


@dataclass
class ContactPlan:
    contact_id: int | None
    forces: list = field(default_factory=list)  # [(k_hat, force(3,))]
    shifts: list = field(default_factory=list)  # [(k_hat, realized shift(2,))]
    objective: float = float("inf")
    max_bilinear_violation: float = 0.0
    solve_time: float = 0.0
    steps: list = field(default_factory=list)  # per-step ForceResult
    candidates: dict = field(default_factory=dict)  # id -> total objective or None


def _states_for(delta_z_traj, states):
    if isinstance(states, dict):
        return [states[k] for k, _ in delta_z_traj.entries]
    states = list(states)
    if len(states) != len(delta_z_traj.entries):
        raise ValueError("need one state snapshot per delta-z entry")
    return states


def plan_for_contact(delta_z_traj, states, contact: ContactPoint, settings: ContactSettings):
    """Per-step QP2 solves for one contact; returns (steps, first infeasible k or None)."""
    steps = []
    warm = ()
    for (k, dz), s in zip(delta_z_traj.entries, states):
        r = solve_qp2(ForceStepProblem(s, dz, contact, settings), warm=warm)
        if not r.feasible:
            return steps, k
        warm = r.active_set
        steps.append((k, r))
    return steps, None


def select_contact(delta_z_traj, states, contacts, settings: ContactSettings | None = None) -> ContactPlan:
    """Pick the contact whose summed per-step QP2 cost is smallest.

    Equivalent to the one-hot MIQP: with exactly one contact active the
    problem separates into one independent force problem per (contact, step).
    Ties within 1e-9 go to the lowest contact id.
    """
    t0 = time.perf_counter()
    settings = settings or ContactSettings()
    if not delta_z_traj.entries:
        raise ValueError("delta-z trajectory is empty; no hand contact requested")
    snaps = _states_for(delta_z_traj, states)
    diagnostics, candidates, results = {}, {}, []
    for c in contacts:
        steps, bad = plan_for_contact(delta_z_traj, snaps, c, settings)
        if bad is not None:
            diagnostics[c.id] = bad
            candidates[c.id] = None
            continue
        total = float(sum(r.objective for _, r in steps))
        candidates[c.id] = total
        results.append((total, c.id, steps))
    if not results:
        raise NoContactFeasible(diagnostics)
    best = min(t for t, _, _ in results)
    total, cid, steps = min((r for r in results if r[0] <= best + 1e-9), key=lambda r: r[1])
    return ContactPlan(
        cid,
        [(k, r.force) for k, r in steps],
        [(k, r.realized_shift) for k, r in steps],
        total,
        max((r.bilinear_violation for _, r in steps), default=0.0),
        time.perf_counter() - t0,
        [r for _, r in steps],
        candidates,
    )


@dataclass
class InContactForce:
    force: np.ndarray
    saturated: bool = False
    result: ForceResult | None = None


def nearest_feasible_force(state: LipmState, dz, contact: ContactPoint, settings: ContactSettings) -> np.ndarray:
    """Cone-feasible force whose ZMP shift is closest to ``dz``.

    The shift equation (m g - f_z) dz = p_z f_xy + lever f_z is linear in the
    force, so its residual is minimized as a small QP over the cone.
    """
    world = settings.world
    p = contact.p
    dz = np.asarray(dz, dtype=float)
    lever = -p[:2] - world.c_z / world.g * state.c_ddot + state.c
    # residual rows: p_z f_xy + (lever + dz) f_z - m g dz
    E = np.zeros((2, 3))
    E[0, 0] = E[1, 1] = p[2]
    E[:, 2] = lever + dz
    e0 = -world.weight * dz
    scale = 1.0 / world.weight
    H = 2 * scale**2 * E.T @ E + 2e-9 * np.eye(3)
    q = 2 * scale**2 * E.T @ e0
    G = _cone_rows(contact.rotation, contact.mu)
    fl, fu = settings.resolved_f_z_bounds
    qp = QpProblem(H, q, G, None, _cone_rhs(contact.f_n_max), [-np.inf, -np.inf, fl], [np.inf, np.inf, fu])
    sol = solve(qp, settings.solver)
    return sol.x if sol.optimal else np.zeros(3)


def in_contact_force(state: LipmState, dz, contact: ContactPoint, settings: ContactSettings | None = None) -> InContactForce:
    """Force command while the hand is attached to ``contact``.

    Infeasible shifts saturate to the nearest cone-feasible force.
    """
    settings = settings or ContactSettings()
    problem = ForceStepProblem(state, dz, contact, settings)
    # a feasible fixed-line force is a feasible start and skips the solver's feasibility phase
    r = solve_qp2(problem, start=solve_qp1(problem))
    if r.feasible:
        return InContactForce(r.force, False, r)
    return InContactForce(nearest_feasible_force(state, dz, contact, settings), True, r)
