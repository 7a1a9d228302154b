"""Closed-loop point-mass testbed for the two-stage controller.

The plant is the LIPM triple integrator driven by the MPC jerk (zero-order
hold at the plant rate) plus external accelerations: pushes at the CoM and the
mismatch between realized and commanded hand force. The foot ZMP follows from
the CoM acceleration and the realized hand force; the robot is considered
fallen once that ZMP stays outside the true support polygon, or the CoM strays
too far from the support.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .contact import ContactSettings, NoContactFeasible, in_contact_force, select_contact
from .model import ContactPoint, LipmState, WorldParams, propagate, zmp_hand, zmp_lipm
from .mpc import (
    LEFT, RIGHT, GaitSchedule, MpcConfig, Phase, WalkingMpc, compute_reach_delay, extract_delta_z,
)

TRACE_COLUMNS = (
    "t", "cx", "cy", "cdx", "cdy", "cddx", "cddy", "zmp_x", "zmp_y", "zmp_hand_x", "zmp_hand_y",
    "slack_norm", "dz_x", "dz_y", "contact_id", "fcmd_x", "fcmd_y", "fcmd_z",
    "freal_x", "freal_y", "freal_z", "fallen",
)
TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Push:
    time: float
    impulse: tuple  # (x, y) [N s]
    duration: float = 0.1

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("push duration must be positive")


@dataclass
class HandParams:
    rest_offset: tuple = (0.1, -0.25, 0.0)  # relative to (c_x, c_y, c_z)
    speed: float = 1.5
    reach_radius: float = 0.8
    attach_tol: float = 0.01
    shoulder_offsets: tuple = ((0.0, 0.2, 0.45), (0.0, -0.2, 0.45))

    def __post_init__(self):
        if not self.reach_radius > 0 or not self.speed > 0:
            raise ValueError("hand reach radius and speed must be positive")


@dataclass
class ForceTracking:
    tau: float = 0.05
    noise: float = 2.0


@dataclass
class FallParams:
    margin: float = 0.02
    window: float = 0.3
    radius: float = 1.0


@dataclass
class Scenario:
    world: WorldParams = field(default_factory=WorldParams)
    gait: GaitSchedule = field(default_factory=GaitSchedule)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    contact: ContactSettings | None = None
    contacts: list = field(default_factory=list)
    pushes: list = field(default_factory=list)
    hand: HandParams = field(default_factory=HandParams)
    tracking: ForceTracking = field(default_factory=ForceTracking)
    fall: FallParams = field(default_factory=FallParams)
    duration: float = 5.0
    plant_dt: float = 0.001
    release_hold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.contact is None:
            self.contact = ContactSettings(world=self.world)
        ratio = self.mpc.dt_mpc / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_mpc must be a multiple of the plant step")
        for d in (self.gait.ss_duration, self.gait.ds_duration, self.gait.initial_ds):
            r = d / self.mpc.dt_mpc
            if abs(r - round(r)) > 1e-9:
                raise ValueError("gait phase durations must be multiples of dt_mpc")


@dataclass
class SimTrace:
    rows: list = field(default_factory=list)
    fallen: bool = False
    contacts_used: list = field(default_factory=list)
    saturation_events: int = 0
    mpc_solutions: list = field(default_factory=list)  # (t, MpcSolution) when kept
    force_updates: list = field(default_factory=list)  # (state, delta_z, contact) per in-contact solve

    def column(self, name: str) -> np.ndarray:
        i = TRACE_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    @property
    def max_slack_norm(self) -> float:
        return float(max((r[11] for r in self.rows), default=0.0))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# trace schema v{TRACE_SCHEMA_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def support_rectangle(kind: Phase, stance: str | None, feet: dict, half_extents) -> tuple:
    """(lo, hi) corners of the support polygon (axis-aligned)."""
    h = np.asarray(half_extents, dtype=float)
    if kind == Phase.DoubleSupport:
        pts = np.vstack([feet[LEFT], feet[RIGHT]])
        return pts.min(axis=0) - h, pts.max(axis=0) + h
    f = np.asarray(feet[stance], dtype=float)
    return f - h, f + h


def rect_excursion(z, lo, hi) -> float:
    """Distance by which ``z`` leaves the box (0 inside)."""
    return float(max(np.max(lo - z), np.max(z - hi), 0.0))


def detect_fall(excursions, com_offsets, fall: FallParams, plant_dt: float) -> bool:
    """Fall test over the most recent ticks.

    ``excursions`` are per-tick distances of the foot ZMP outside the true
    support polygon; ``com_offsets`` are per-tick CoM distances to the
    support center.
    """
    n = int(round(fall.window / plant_dt))
    if len(com_offsets) and com_offsets[-1] > fall.radius:
        return True
    if len(excursions) < n:
        return False
    return bool(np.all(np.asarray(excursions[-n:]) > fall.margin))


def shoulder_anchors(state: LipmState, world: WorldParams, hand: HandParams):
    base = np.array([state.c[0], state.c[1], world.c_z])
    return [base + np.asarray(o, dtype=float) for o in hand.shoulder_offsets]


def reachable_contacts(scenario: Scenario, state: LipmState, hand_position, horizon_steps: int | None = None):
    """Contacts within arm reach whose travel time fits in the horizon (input order kept)."""
    N = scenario.mpc.horizon_steps if horizon_steps is None else horizon_steps
    anchors = shoulder_anchors(state, scenario.world, scenario.hand)
    out = []
    for c in scenario.contacts:
        if min(np.linalg.norm(c.p - a) for a in anchors) > scenario.hand.reach_radius:
            continue
        d = compute_reach_delay(hand_position, c, scenario.hand.speed, scenario.mpc.dt_mpc, N + 1)
        if d <= N:
            out.append(c)
    return out


class Simulator:
    """Runs one scenario; ``step`` advances one plant tick."""

    def __init__(self, scenario: Scenario, keep_solutions: bool = False):
        self.sc = scenario
        sc = scenario
        self.mpc = WalkingMpc(sc.mpc, replace(sc.world, dt=sc.mpc.dt_mpc))
        self.rng = np.random.default_rng(sc.seed)
        self.ticks_per_mpc = int(round(sc.mpc.dt_mpc / sc.plant_dt))
        self.fall_ticks = int(round(sc.fall.window / sc.plant_dt))
        self.release_ticks = int(round(sc.release_hold / sc.plant_dt))
        self.tick = 0
        self.state = LipmState()
        self.gait = sc.gait
        half = sc.mpc.stance_width / 2
        self.feet = {LEFT: np.array([0.0, half]), RIGHT: np.array([0.0, -half])}
        self.hand = self._hand_rest()
        self.target: ContactPoint | None = None
        self.attached: ContactPoint | None = None
        self.jerk = np.zeros(2)
        self.f_cmd = np.zeros(3)
        self.f_lag = np.zeros(3)
        self.f_real = np.zeros(3)
        self.solution = None
        self.dz_now = np.zeros(2)
        self.idle_ticks = 0
        self.out_ticks = 0
        self.trace = SimTrace()
        self.keep_solutions = keep_solutions
        self.contact_by_id = {c.id: c for c in sc.contacts}

    def _hand_rest(self) -> np.ndarray:
        o = self.sc.hand.rest_offset
        return np.array([self.state.c[0] + o[0], self.state.c[1] + o[1], self.sc.world.c_z + o[2]])

    @property
    def time(self) -> float:
        return self.tick * self.sc.plant_dt

    def _support(self):
        kind, _, stance = self.gait.current
        return support_rectangle(kind, stance, self.feet, self.sc.mpc.foot_half_extents)

    def _control(self):
        sc = self.sc
        if self.tick > 0:
            prev = self.gait
            self.gait = prev.advanced(sc.mpc.dt_mpc)
            for i in range(prev.phase_index + 1, self.gait.phase_index + 1):
                kind, _, _ = self.gait.phase(i)
                _, _, stance_before = self.gait.phase(i - 1)
                if kind == Phase.DoubleSupport and stance_before is not None:
                    swing = LEFT if stance_before == RIGHT else RIGHT
                    self.feet[swing] = self.solution.footsteps[0].copy()
        if self.attached is not None:
            sol, dz = self._execute(0)
            if dz:
                self.idle_ticks = 0
            if dz.entries and dz.entries[0][0] == 0:
                now = sol.predicted_state(0)
                self.trace.force_updates.append((now, self.dz_now.copy(), self.attached))
                res = in_contact_force(now, self.dz_now, self.attached, sc.contact)
                self.f_cmd = np.asarray(res.force, dtype=float)
                if res.saturated:
                    self.trace.saturation_events += 1
            else:
                self.f_cmd = np.zeros(3)
            return

        reachable = reachable_contacts(sc, self.state, self.hand)
        if self.target is not None and all(c.id != self.target.id for c in reachable):
            self.target = None
        sol, dz = self._execute(0)
        if not dz:
            self.target = None
            return
        if not reachable:
            return
        if self._feet_suffice(sol):
            # the feet can hold the ZMP on their own; the hand only unloads them
            plan = self._select(dz, sol, reachable)
            if plan is not None:
                self.target = self.contact_by_id[plan.contact_id]
            return
        # the feet alone cannot: plan around the time the hand needs to arrive
        candidates = [self.target] if self.target is not None else reachable
        n_delay = min(self._delay(c) for c in candidates)
        if n_delay == 0:
            return
        delayed = self.mpc.solve(self.state, self.gait, self.feet, n_delay)
        dz_d = extract_delta_z(delayed, sc.mpc.slack_eps)
        if not dz_d:
            return
        first = dz_d.steps[0]
        timely = [c for c in reachable if self._delay(c) <= first]
        plan = self._select(dz_d, delayed, timely)
        if plan is not None:
            self.target = self.contact_by_id[plan.contact_id]
            self._use(delayed, dz_d)

    def _feet_suffice(self, sol) -> bool:
        """True when the slack stays within the margin between the scaled and the true feet."""
        mpc = self.sc.mpc
        margin = np.asarray(mpc.foot_half_extents, dtype=float) - mpc.conservative_half_extents
        return bool(np.all(np.abs(sol.slack) <= margin))

    def _select(self, dz, sol, contacts):
        if not contacts:
            return None
        try:
            return select_contact(dz, [sol.predicted_state(k) for k in dz.steps], contacts, self.sc.contact)
        except NoContactFeasible:
            return None

    def _delay(self, contact) -> int:
        sc = self.sc
        return compute_reach_delay(self.hand, contact, sc.hand.speed, sc.mpc.dt_mpc, sc.mpc.horizon_steps)

    def _execute(self, n_delay: int):
        sol = self.mpc.solve(self.state, self.gait, self.feet, n_delay)
        dz = extract_delta_z(sol, self.sc.mpc.slack_eps)
        if self.keep_solutions:
            self.trace.mpc_solutions.append((self.time, sol))
        self._use(sol, dz)
        return sol, dz

    def _use(self, sol, dz):
        self.solution = sol
        if self.keep_solutions:
            self.trace.mpc_solutions[-1] = (self.time, sol)
        self.jerk = sol.jerk[0].copy()
        self.dz_now = dz.entries[0][1] if dz.entries and dz.entries[0][0] == 0 else np.zeros(2)

    def _move_hand(self):
        sc = self.sc
        if self.attached is not None:
            return
        goal = self.target.p if self.target is not None else self._hand_rest()
        d = goal - self.hand
        dist = float(np.linalg.norm(d))
        max_step = sc.hand.speed * sc.plant_dt
        if dist <= max_step:
            self.hand = goal.copy()
        else:
            self.hand = self.hand + d * (max_step / dist)
        if self.target is not None and np.linalg.norm(self.target.p - self.hand) <= sc.hand.attach_tol:
            self.attached = self.target
            if self.attached.id not in self.trace.contacts_used:
                self.trace.contacts_used.append(self.attached.id)
            self.f_lag = np.zeros(3)
            self.idle_ticks = 0

    def step(self):
        """Advance one plant tick; returns the recorded row."""
        sc = self.sc
        if self.tick % self.ticks_per_mpc == 0:
            self._control()
        self._move_hand()

        if self.attached is not None:
            alpha = 1.0 - math.exp(-sc.plant_dt / sc.tracking.tau)
            self.f_lag = self.f_lag + alpha * (self.f_cmd - self.f_lag)
            noise = np.zeros(3)
            if sc.tracking.noise > 0 and np.any(self.f_cmd != 0):
                noise = self.rng.uniform(-sc.tracking.noise, sc.tracking.noise, 3)
            self.f_real = self.f_lag + noise
        else:
            self.f_cmd = np.zeros(3)
            self.f_lag = np.zeros(3)
            self.f_real = np.zeros(3)

        st = self.state
        w = sc.world
        a_hand = (self.f_real[:2] - self.f_cmd[:2]) / w.m
        z_lipm = zmp_lipm(st, w)
        if self.attached is not None:
            actual = LipmState(st.c, st.c_dot, st.c_ddot + a_hand)
            z_feet = zmp_hand(actual, self.f_real, self.attached.p, w)
        else:
            z_feet = z_lipm
        lo, hi = self._support()
        exc = rect_excursion(z_feet, lo, hi)
        self.out_ticks = self.out_ticks + 1 if exc > sc.fall.margin else 0
        com_off = float(np.linalg.norm(st.c - 0.5 * (lo + hi)))
        fallen = self.out_ticks >= self.fall_ticks or com_off > sc.fall.radius

        cid = self.attached.id if self.attached is not None else (
            self.target.id if self.target is not None else -1)
        row = (
            self.time, st.c[0], st.c[1], st.c_dot[0], st.c_dot[1], st.c_ddot[0], st.c_ddot[1],
            z_lipm[0], z_lipm[1], z_feet[0], z_feet[1],
            self.solution.slack_norm, self.dz_now[0], self.dz_now[1], cid,
            self.f_cmd[0], self.f_cmd[1], self.f_cmd[2],
            self.f_real[0], self.f_real[1], self.f_real[2], fallen,
        )
        self.trace.rows.append(tuple(float(v) if isinstance(v, (np.floating, float)) else v for v in row))
        if fallen:
            self.trace.fallen = True

        a_ext = a_hand.copy()
        t = self.time
        for p in sc.pushes:
            if p.time <= t + 1e-12 < p.time + p.duration:
                a_ext += np.asarray(p.impulse, dtype=float) / p.duration / w.m
        nxt = propagate(st, self.jerk, w, sc.plant_dt)
        h = sc.plant_dt
        self.state = LipmState(nxt.c + a_ext * h * h / 2, nxt.c_dot + a_ext * h, nxt.c_ddot)

        if self.attached is not None:
            self.idle_ticks += 1
            if self.idle_ticks >= self.release_ticks:
                self.attached = None
                self.target = None
        self.tick += 1
        return row

    def run(self) -> SimTrace:
        n = int(round(self.sc.duration / self.sc.plant_dt))
        while self.tick < n and not self.trace.fallen:
            self.step()
        return self.trace


def simulate(scenario: Scenario, keep_solutions: bool = False) -> SimTrace:
    return Simulator(scenario, keep_solutions).run()
