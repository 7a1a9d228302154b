"""Stage 1: receding-horizon CoM / footstep planner with ZMP slack.

The ZMP bounds of each predicted sample are relaxed by a slack ``S_k``
(``Z_lo <= Z_lipm + S <= Z_hi``) that is penalized quadratically. Slack rows
before the hand-reach delay are pinned to zero. Whatever slack survives the
optimization is the support-polygon shift requested from the hand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .model import ContactPoint, LipmState, WorldParams
from .qp import MalformedProblem, QpProblem, QpSolution, SolverSettings, solve

LEFT, RIGHT = "left", "right"
_TIME_EPS = 1e-9


class Phase(str, Enum):
    LeftSupport = "LeftSupport"
    RightSupport = "RightSupport"
    DoubleSupport = "DoubleSupport"


def _other(side: str) -> str:
    return LEFT if side == RIGHT else RIGHT


@dataclass
class GaitSchedule:
    """Fixed-timing alternating gait.

    Phase 0 is an initial double support of ``initial_ds`` seconds, followed by
    single supports (starting on ``first_support``) separated by double
    supports. With ``walking=False`` the robot stands in double support forever.
    """

    ss_duration: float = 1.0
    ds_duration: float = 0.1
    initial_ds: float = 0.5
    first_support: str = RIGHT
    walking: bool = True
    phase_index: int = 0
    elapsed: float = 0.0

    def __post_init__(self):
        if self.ss_duration <= 0 or self.ds_duration <= 0 or self.initial_ds <= 0:
            raise ValueError("gait phase durations must be positive")
        if self.first_support not in (LEFT, RIGHT):
            raise ValueError(f"first_support must be 'left' or 'right', got {self.first_support!r}")

    def phase(self, i: int) -> tuple[Phase, float, str | None]:
        """(kind, duration, stance side) of phase ``i``."""
        if not self.walking:
            return Phase.DoubleSupport, math.inf, None
        if i == 0:
            return Phase.DoubleSupport, self.initial_ds, None
        if i % 2 == 0:
            return Phase.DoubleSupport, self.ds_duration, None
        side = self.first_support if (i // 2) % 2 == 0 else _other(self.first_support)
        kind = Phase.LeftSupport if side == LEFT else Phase.RightSupport
        return kind, self.ss_duration, side

    @property
    def current(self) -> tuple[Phase, float, str | None]:
        return self.phase(self.phase_index)

    def advanced(self, dt: float) -> "GaitSchedule":
        """Copy of the schedule moved forward by ``dt`` seconds."""
        i, e = self.phase_index, self.elapsed + dt
        while True:
            _, dur, _ = self.phase(i)
            if e < dur - _TIME_EPS:
                break
            e -= dur
            i += 1
        return replace(self, phase_index=i, elapsed=max(e, 0.0))

    def lookahead(self, times):
        """Phase index active at each future time (half-open phase intervals)."""
        out = []
        for t in times:
            i, rem = self.phase_index, t + self.elapsed
            while True:
                _, dur, _ = self.phase(i)
                if rem < dur - _TIME_EPS:
                    break
                rem -= dur
                i += 1
            out.append(i)
        return out


@dataclass
class MpcConfig:
    horizon_steps: int = 16
    dt_mpc: float = 0.1
    polygon_scale: float = 0.1
    foot_half_extents: tuple = (0.1, 0.05)
    w_jerk: float = 1e-6
    w_vel: float = 1.0
    w_zmp: float = 1.0
    w_slack: float = 1e4
    w_foot: float = 1e-2
    # per-step displacement box relative to the previous stance foot;
    # lateral limits are for a left step and mirrored for a right step
    step_x: tuple = (-0.3, 0.3)
    step_y: tuple = (0.12, 0.4)
    stance_width: float = 0.2
    ref_velocity: tuple = (0.0, 0.0)
    # footstep exclusion half-planes: each (nx, ny, d) keeps n . foot <= d
    exclusions: tuple = ()
    slack_eps: float = 1e-4

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if not 0 < self.polygon_scale <= 1:
            raise ValueError("polygon_scale must lie in (0, 1]")
        weights = (self.w_jerk, self.w_vel, self.w_zmp, self.w_slack, self.w_foot)
        if min(weights) < 0 or not self.w_slack > 0:
            raise ValueError("weights must be nonnegative and w_slack positive")
        if self.dt_mpc <= 0:
            raise ValueError("dt_mpc must be positive")

    @property
    def conservative_half_extents(self) -> np.ndarray:
        return self.polygon_scale * np.asarray(self.foot_half_extents, dtype=float)


@dataclass
class MpcSolution:
    jerk: np.ndarray  # (N, 2)
    footsteps: np.ndarray  # (M, 2)
    footstep_sides: list
    slack: np.ndarray  # (N, 2)
    zmp: np.ndarray  # (N, 2) predicted Z_lipm at samples 1..N
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    n_delay: int = 0
    qp: QpSolution | None = None

    @property
    def slack_norm(self) -> float:
        return float(np.linalg.norm(self.slack))

    def predicted_state(self, k: int) -> LipmState:
        """State at the sample constrained by slack row ``k`` (time (k+1)*dt)."""
        return LipmState(self.pos[k], self.vel[k], self.acc[k])


@dataclass
class DeltaZTrajectory:
    entries: list = field(default_factory=list)  # [(k_hat, dz(2,))]

    def __len__(self):
        return len(self.entries)

    def __bool__(self):
        return bool(self.entries)

    @property
    def steps(self) -> list:
        return [k for k, _ in self.entries]


def prediction_matrices(N: int, T: float, c_z: float, g: float):
    """Per-axis maps from (state, jerk sequence) to samples 1..N.

    Returns dict of (Ps, Pu) pairs for 'pos', 'vel', 'acc', 'zmp'.
    """
    k = np.arange(1, N + 1, dtype=float)
    Pps = np.column_stack([np.ones(N), k * T, k * k * T * T / 2])
    Pvs = np.column_stack([np.zeros(N), np.ones(N), k * T])
    Pas = np.column_stack([np.zeros(N), np.zeros(N), np.ones(N)])
    Ppu = np.zeros((N, N))
    Pvu = np.zeros((N, N))
    Pau = np.zeros((N, N))
    for r in range(N):
        for i in range(r + 1):
            d = r - i  # full steps after the jerk interval
            Ppu[r, i] = (1 + 3 * d + 3 * d * d) * T**3 / 6
            Pvu[r, i] = (1 + 2 * d) * T * T / 2
            Pau[r, i] = T
    h = c_z / g
    return {
        "pos": (Pps, Ppu),
        "vel": (Pvs, Pvu),
        "acc": (Pas, Pau),
        "zmp": (Pps - h * Pas, Ppu - h * Pau),
    }


@dataclass
class _Support:
    # foot references are ("fixed", xy) or ("var", j)
    kind: Phase
    feet: tuple  # one entry for single support, (trailing, leading) for double


def _plan_supports(gait: GaitSchedule, feet: dict, N: int, T: float, config: MpcConfig):
    """Supports at samples 1..N and the footstep variables they need."""
    idx = gait.lookahead([k * T for k in range(1, N + 1)])
    latest = {LEFT: ("fixed", np.asarray(feet[LEFT], float)), RIGHT: ("fixed", np.asarray(feet[RIGHT], float))}
    touchdowns = []  # (j, side, prev_stance_ref)
    supports = []
    cur = gait.phase_index
    cur_kind, _, cur_side = gait.phase(cur)
    # trailing/leading order of the feet in the current double support
    if cur_kind == Phase.DoubleSupport:
        if cur == 0 or not gait.walking:
            order = (RIGHT, LEFT) if gait.first_support == RIGHT else (LEFT, RIGHT)
        else:
            _, _, prev_side = gait.phase(cur - 1)
            order = (prev_side, _other(prev_side))
    else:
        order = (cur_side, _other(cur_side))
    phase_support = {}
    for i in range(cur, max(idx) + 1):
        kind, _, side = gait.phase(i)
        if kind == Phase.DoubleSupport:
            if i > cur and i > 0:
                _, _, stance = gait.phase(i - 1)
                swing = _other(stance)
                j = len(touchdowns)
                touchdowns.append((j, swing, latest[stance]))
                latest[swing] = ("var", j)
                order = (stance, swing)
            phase_support[i] = _Support(kind, (latest[order[0]], latest[order[1]]))
        else:
            phase_support[i] = _Support(kind, (latest[side],))
    for i in idx:
        supports.append(phase_support[i])
    return supports, touchdowns


def _nominal_step(side: str, config: MpcConfig, gait: GaitSchedule) -> np.ndarray:
    T_step = gait.ss_duration + gait.ds_duration
    vx, vy = config.ref_velocity
    dy = config.stance_width if side == LEFT else -config.stance_width
    return np.array([vx * T_step, dy + vy * T_step])


def build_mpc_qp(state: LipmState, gait: GaitSchedule, config: MpcConfig, n_delay: int,
                 world: WorldParams, feet: dict):
    """Assemble the stage-1 QP.

    ``feet`` maps 'left'/'right' to the current (x, y) of each foot on the
    ground (the swing foot entry is ignored during single support).
    Returns ``(problem, layout)`` where layout records variable offsets.
    """
    N, T = config.horizon_steps, config.dt_mpc
    if not 0 <= n_delay <= N:
        raise MalformedProblem(f"n_delay={n_delay} outside [0, {N}]")
    for side in (LEFT, RIGHT):
        if np.asarray(feet[side]).shape != (2,):
            raise MalformedProblem(f"foot position for {side} must be a 2-vector")
    P = prediction_matrices(N, T, world.c_z, world.g)
    supports, touchdowns = _plan_supports(gait, feet, N, T, config)
    M = len(touchdowns)
    n = 4 * N + 2 * M
    J = lambda a: a * N  # noqa: E731
    F = lambda a: 2 * N + a * M  # noqa: E731
    S = lambda a: 2 * N + 2 * M + a * N  # noqa: E731

    H = np.zeros((n, n))
    q = np.zeros(n)

    def add_ls(rows: np.ndarray, target: np.ndarray, w: float):
        if w == 0:
            return
        H[:] += 2 * w * rows.T @ rows
        q[:] += -2 * w * rows.T @ target

    def foot_expr(ref, a):
        """(coefficient row over x, constant) for one axis of a foot reference."""
        row = np.zeros(n)
        if ref[0] == "var":
            row[F(a) + ref[1]] = 1.0
            return row, 0.0
        return row, float(ref[1][a])

    A_rows, lo, hi = [], [], []
    h_cons = config.conservative_half_extents
    v_ref = np.asarray(config.ref_velocity, dtype=float)
    for a in range(2):
        s0 = state.axis(a)
        Pzs, Pzu = P["zmp"]
        Pvs, Pvu = P["vel"]
        zfree = Pzs @ s0
        vfree = Pvs @ s0
        # velocity tracking
        rows = np.zeros((N, n))
        rows[:, J(a):J(a) + N] = Pvu
        add_ls(rows, v_ref[a] - vfree, config.w_vel)
        # jerk
        rows = np.zeros((N, n))
        rows[:, J(a):J(a) + N] = np.eye(N)
        add_ls(rows, np.zeros(N), config.w_jerk)
        # slack
        rows = np.zeros((N, n))
        rows[:, S(a):S(a) + N] = np.eye(N)
        add_ls(rows, np.zeros(N), config.w_slack)
        zrows = np.zeros((N, n))
        ztarget = np.zeros(N)
        for k, sup in enumerate(supports):
            zrow = np.zeros(n)
            zrow[J(a):J(a) + N] = Pzu[k]
            zrow[S(a) + k] = 1.0
            exprs = [foot_expr(ref, a) for ref in sup.feet]
            # ZMP centering cost (no slack in the tracked quantity)
            crow = np.zeros(n)
            crow[J(a):J(a) + N] = Pzu[k]
            cconst = zfree[k]
            for er, ec in exprs:
                crow -= er / len(exprs)
                cconst -= ec / len(exprs)
            zrows[k] = crow
            ztarget[k] = -cconst
            h = h_cons[a]
            if len(exprs) == 1 or (sup.feet[0][0] == "fixed" and sup.feet[1][0] == "fixed"):
                if len(exprs) == 1:
                    fl = fh = exprs[0]
                else:
                    fl, fh = sorted(exprs, key=lambda e: e[1])
                A_rows.append(zrow - fl[0])
                lo.append(fl[1] - h - zfree[k])
                hi.append(fh[1] + h - zfree[k] if fl is fh else np.inf)
                if fl is not fh:
                    A_rows.append(zrow - fh[0])
                    lo.append(-np.inf)
                    hi.append(fh[1] + h - zfree[k])
            else:
                # trailing and leading feet ordered by the nominal step direction
                lead_side = next(sd for j, sd, _ in touchdowns if sup.feet[1] == ("var", j)) \
                    if sup.feet[1][0] == "var" else None
                nom = _nominal_step(lead_side, config, gait)[a] if lead_side else 0.0
                trail, lead = exprs
                fl, fh = (trail, lead) if nom >= 0 else (lead, trail)
                A_rows.append(zrow - fl[0])
                lo.append(fl[1] - h - zfree[k])
                hi.append(np.inf)
                A_rows.append(zrow - fh[0])
                lo.append(-np.inf)
                hi.append(fh[1] + h - zfree[k])
        add_ls(zrows, ztarget, config.w_zmp)
        # footstep displacement cost and kinematic box
        for j, side, prev in touchdowns:
            row = np.zeros(n)
            row[F(a) + j] = 1.0
            pr, pc = foot_expr(prev, a)
            row -= pr
            nom = _nominal_step(side, config, gait)[a]
            add_ls(row[None, :], np.array([nom + pc]), config.w_foot)
            if a == 0:
                blo, bhi = config.step_x
            elif side == LEFT:
                blo, bhi = config.step_y
            else:
                blo, bhi = -config.step_y[1], -config.step_y[0]
            A_rows.append(row)
            lo.append(blo + pc)
            hi.append(bhi + pc)
    for j, _, _ in touchdowns:
        for nx, ny, d in config.exclusions:
            row = np.zeros(n)
            row[F(0) + j] = nx
            row[F(1) + j] = ny
            A_rows.append(row)
            lo.append(-np.inf)
            hi.append(d)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for a in range(2):
        lb[S(a):S(a) + n_delay] = 0.0
        ub[S(a):S(a) + n_delay] = 0.0
    problem = QpProblem(H, q, np.array(A_rows) if A_rows else None,
                        np.array(lo) if lo else None, np.array(hi) if hi else None, lb, ub)
    layout = {"N": N, "M": M, "touchdowns": touchdowns, "supports": supports, "P": P}
    return problem, layout


def unpack_solution(state: LipmState, x: np.ndarray, layout: dict, n_delay: int,
                    qp: QpSolution | None = None) -> MpcSolution:
    N, M, P = layout["N"], layout["M"], layout["P"]
    jerk = np.column_stack([x[0:N], x[N:2 * N]])
    feet = np.column_stack([x[2 * N:2 * N + M], x[2 * N + M:2 * N + 2 * M]])
    slack = np.column_stack([x[2 * N + 2 * M:3 * N + 2 * M], x[3 * N + 2 * M:4 * N + 2 * M]])
    slack[:n_delay] = 0.0
    out = {}
    for key in ("pos", "vel", "acc", "zmp"):
        Ps, Pu = P[key]
        out[key] = np.column_stack([Ps @ state.axis(a) + Pu @ jerk[:, a] for a in range(2)])
    return MpcSolution(jerk, feet, [sd for _, sd, _ in layout["touchdowns"]], slack,
                       out["zmp"], out["pos"], out["vel"], out["acc"], n_delay, qp)


class WalkingMpc:
    """Stage-1 controller; keeps the previous working set as a warm start."""

    def __init__(self, config: MpcConfig | None = None, world: WorldParams | None = None,
                 settings: SolverSettings | None = None):
        self.config = config or MpcConfig()
        self.world = world or WorldParams(dt=self.config.dt_mpc)
        self.settings = settings or SolverSettings()
        self._warm = ()

    def solve(self, state: LipmState, gait: GaitSchedule, feet: dict, n_delay: int = 0) -> MpcSolution:
        problem, layout = build_mpc_qp(state, gait, self.config, n_delay, self.world, feet)
        sol = solve(problem, self.settings, active_set=self._warm)
        if not sol.optimal:
            raise RuntimeError(f"stage-1 MPC QP ended with status {sol.status}")
        self._warm = sol.active_set
        return unpack_solution(state, sol.x, layout, n_delay, sol)


def extract_delta_z(solution: MpcSolution, slack_eps: float = 1e-4) -> DeltaZTrajectory:
    """Requested support-polygon shifts: the slack rows with norm above ``slack_eps``."""
    entries = []
    for k, s in enumerate(np.asarray(solution.slack)):
        if np.linalg.norm(s) > slack_eps:
            entries.append((k, np.array(s, dtype=float)))
    return DeltaZTrajectory(entries)


def compute_reach_delay(hand_position, contact: ContactPoint | np.ndarray, hand_speed: float,
                        dt_mpc: float, horizon_steps: int = 16) -> int:
    """MPC steps the hand needs to reach a contact, saturated at the horizon."""
    if not hand_speed > 0:
        raise ValueError("hand_speed must be positive")
    p = contact.p if isinstance(contact, ContactPoint) else np.asarray(contact, dtype=float)
    dist = float(np.linalg.norm(p - np.asarray(hand_position, dtype=float)))
    steps = math.ceil(dist / hand_speed / dt_mpc - 1e-9)
    return int(min(max(steps, 0), horizon_steps))
