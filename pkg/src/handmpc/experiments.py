"""Batch experiments: relaxation sweep, solve-time benchmark, max-push search.

Every random draw comes from a generator seeded by ``(master_seed, counter)``
so results do not depend on evaluation order or worker count.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .contact import (
    ContactSettings, ForceStepProblem, in_contact_force, mccormick_gap_bound, select_contact,
    solve_qp1, solve_qp2,
)
from .model import ContactPoint, LipmState, rotation_from_normal
from .mpc import DeltaZTrajectory
from .sim import Push, simulate

SWEEP_COLUMNS = ("mu", "dz_x", "dz_y", "cone_seed", "qp1_status", "qp1_force_norm",
                 "qp2_status", "qp2_force_norm", "bilinear_violation")
IN_CONTACT_PUSH = 30.0  # N*s, enough to need the hand on the nearest wall
BENCH_COLUMNS = ("horizon_steps", "num_contacts", "median_ms", "p90_ms", "status")
MAXPUSH_COLUMNS = ("variant", "phase", "hands", "max_impulse_ns")
CSV_SCHEMA_VERSION = 1
FULL_SCALE_SAMPLES = 2_000_000


def case_rng(seed: int, *counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, counter)]))


def random_cone_rotation(rng: np.random.Generator, facing=(-1.0, 0.0, 0.0)) -> np.ndarray:
    """Uniform rotation whose normal lies in the hemisphere around ``facing``."""
    facing = np.asarray(facing, dtype=float)
    while True:
        n = rng.normal(size=3)
        norm = np.linalg.norm(n)
        if norm > 1e-12 and n @ facing > 0:
            break
    R = rotation_from_normal(n / norm)
    th = rng.uniform(0.0, 2 * np.pi)
    spin = np.array([[np.cos(th), np.sin(th), 0.0], [-np.sin(th), np.cos(th), 0.0], [0.0, 0.0, 1.0]])
    return spin @ R


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema v{CSV_SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def _f(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- sweep


@dataclass
class SweepStats:
    samples: int
    qp1_success: float
    qp2_success: float
    qp1_mean_force: float
    qp2_mean_force: float
    max_bilinear_violation: float
    violation_bound: float
    dominance_failures: int
    seconds: float

    def lines(self) -> list:
        return [
            f"samples: {self.samples}",
            f"QP1 success: {100 * self.qp1_success:.1f}% mean force {self.qp1_mean_force:.2f} N",
            f"QP2 success: {100 * self.qp2_success:.1f}% mean force {self.qp2_mean_force:.2f} N",
            f"max bilinear violation: {self.max_bilinear_violation:.4f} N (bound {self.violation_bound:.4f} N)",
            f"dominance failures: {self.dominance_failures}",
        ]


def sweep_cases(cfg: ExperimentConfig, samples: int, seed: int):
    """Yield ``(cone_seed, state, contact, mu, dz)`` for ``samples`` cases.

    One cone orientation and CoM acceleration is drawn per block; each block
    crosses the mu grid with the dz grid.
    """
    sw = cfg.sweep
    mus = np.linspace(*sw.mu_range, sw.mu_steps)
    dzs = np.linspace(*sw.dz_range, sw.dz_steps)
    produced = 0
    draw = 0
    while produced < samples:
        rng = case_rng(seed, draw)
        R = random_cone_rotation(rng)
        acc = rng.uniform(-sw.acc_range, sw.acc_range, 2)
        state = LipmState(np.zeros(2), np.zeros(2), acc)
        for mu in mus:
            contact = ContactPoint(sw.contact_point, R, mu, sw.f_n_max)
            for dx in dzs:
                for dy in dzs:
                    if produced >= samples:
                        return
                    produced += 1
                    yield draw, state, contact, float(mu), np.array([dx, dy])
        draw += 1


def run_sweep(cfg: ExperimentConfig, samples: int | None = None, seed: int | None = None,
              csv_path=None) -> tuple[SweepStats, list]:
    samples = cfg.sweep.samples if samples is None else samples
    if samples < 1:
        raise ValueError("sample count must be >= 1")
    seed = cfg.seed if seed is None else seed
    settings = ContactSettings(world=cfg.world, kappa=cfg.sweep.kappa,
                               s_z_bounds=(cfg.sweep.s_z, cfg.sweep.s_z),
                               **{k: v for k, v in cfg.contact_kwargs.items()
                                  if k not in ("kappa", "s_z_bounds")})
    t0 = time.perf_counter()
    rows = []
    n1 = n2 = dom = 0
    f1 = f2 = 0.0
    vmax = 0.0
    for cone_seed, state, contact, mu, dz in sweep_cases(cfg, samples, seed):
        prob = ForceStepProblem(state, dz, contact, settings)
        r1 = solve_qp1(prob)
        r2 = solve_qp2(prob)  # cold, so dominance over QP1 is checked rather than inherited
        fn1 = float(np.linalg.norm(r1.force)) if r1.feasible else float("nan")
        fn2 = float(np.linalg.norm(r2.force)) if r2.feasible else float("nan")
        if r1.feasible:
            n1 += 1
            f1 += fn1
            if not r2.feasible or r2.objective > r1.objective + 1e-8:
                dom += 1
        if r2.feasible:
            n2 += 1
            f2 += fn2
            vmax = max(vmax, r2.bilinear_violation)
        rows.append((_f(mu), _f(dz[0]), _f(dz[1]), cone_seed,
                     "Optimal" if r1.feasible else "Infeasible", _f(fn1),
                     "Optimal" if r2.feasible else "Infeasible", _f(fn2),
                     _f(r2.bilinear_violation) if r2.feasible else "nan"))
    stats = SweepStats(
        samples, n1 / samples, n2 / samples,
        f1 / n1 if n1 else float("nan"), f2 / n2 if n2 else float("nan"),
        vmax, mccormick_gap_bound(settings, cfg.sweep.contact_point[2]), dom,
        time.perf_counter() - t0,
    )
    if csv_path is not None:
        _write_rows(csv_path, SWEEP_COLUMNS, rows)
    return stats, rows


# ---------------------------------------------------------------- bench


@dataclass
class BenchInstance:
    horizon_steps: int
    contacts: list
    delta_z: DeltaZTrajectory
    states: list


def _bench_contact(rng, cid: int) -> ContactPoint:
    p = np.array([rng.uniform(0.35, 0.6), rng.uniform(-0.4, 0.4), rng.uniform(0.8, 1.2)])
    return ContactPoint(p, random_cone_rotation(rng), rng.uniform(0.5, 1.0), 200.0, cid)


def _feasible_everywhere(contact, dz, states, settings) -> bool:
    return all(solve_qp2(ForceStepProblem(s, d, contact, settings)).feasible
               for (_, d), s in zip(dz.entries, states))


def bench_instance(cfg: ExperimentConfig, horizon: int, n_contacts: int, seed: int) -> BenchInstance:
    """Random instance in which every candidate contact is feasible at every step.

    Instances with the same horizon share the trajectory, and their contacts are
    prefixes of one candidate stream, so only the contact count varies along a row.
    """
    settings = cfg.contact_settings()
    rng = case_rng(seed, 1, horizon)
    shift = rng.uniform(-0.03, 0.03, 2)
    entries, states = [], []
    for k in range(horizon):
        entries.append((k, shift + rng.uniform(-0.005, 0.005, 2)))
        states.append(LipmState(rng.uniform(-0.05, 0.05, 2), rng.uniform(-0.3, 0.3, 2), rng.uniform(-1, 1, 2)))
    dz = DeltaZTrajectory(entries)
    contacts = []
    while len(contacts) < n_contacts:
        c = _bench_contact(rng, len(contacts))
        if _feasible_everywhere(c, dz, states, settings):
            contacts.append(c)
    return BenchInstance(horizon, contacts, dz, states)


def instance_rows(inst: BenchInstance) -> list:
    """Flat text rows describing an instance (used to check reproducibility)."""
    rows = []
    for c in inst.contacts:
        rows.append(["contact", c.id, *map(_f, c.p), *map(_f, c.rotation.ravel()), _f(c.mu)])
    for (k, d), s in zip(inst.delta_z.entries, inst.states):
        rows.append(["step", k, *map(_f, d), *map(_f, np.concatenate([s.c, s.c_dot, s.c_ddot]))])
    return rows


def bench_instances_text(cfg: ExperimentConfig, seed: int | None = None) -> str:
    seed = cfg.bench.seed if seed is None else seed
    buf = io.StringIO()
    w = csv.writer(buf)
    for h in cfg.bench.horizons:
        for n in cfg.bench.contacts:
            w.writerow(["instance", h, n])
            w.writerows(instance_rows(bench_instance(cfg, h, n, seed)))
    return buf.getvalue()


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)  # (horizon, n_contacts, median_ms, p90_ms, status)
    in_contact_median_ms: float = float("nan")
    in_contact_p90_ms: float = float("nan")
    # same solve on random single-step instances, most of which start infeasible
    in_contact_random_median_ms: float = float("nan")

    def median(self, horizon: int, n_contacts: int) -> float:
        for h, n, med, _, _ in self.rows:
            if h == horizon and n == n_contacts:
                return med
        raise KeyError((horizon, n_contacts))


def _time_ms(fn, reps: int) -> tuple[list, object]:
    out = None
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return times, out


def in_contact_workload(cfg: ExperimentConfig, seed: int) -> list:
    """Force-update inputs of a walk pushed into the nearest wall, in solve order.

    Empty when the configuration has no wall variant or the hand never attaches.
    """
    if not cfg.maxpush.variants:
        return []
    d = np.asarray(cfg.maxpush.direction, dtype=float)
    push = Push(cfg.maxpush.push_start, tuple(IN_CONTACT_PUSH * d / np.linalg.norm(d)), cfg.maxpush.push_duration)
    wall_x = min(cfg.maxpush.variants.values())
    sc = cfg.scenario(wall_x=wall_x, pushes=[push], duration=push.time + 3.0, seed=seed)
    return simulate(sc).force_updates


def run_bench(cfg: ExperimentConfig, seed: int | None = None, csv_path=None) -> BenchResult:
    seed = cfg.bench.seed if seed is None else seed
    reps = max(20, cfg.bench.repetitions)
    settings = cfg.contact_settings()
    res = BenchResult()
    for h in cfg.bench.horizons:
        for n in cfg.bench.contacts:
            inst = bench_instance(cfg, h, n, seed)
            select_contact(inst.delta_z, inst.states, inst.contacts, settings)  # warm-up
            times, plan = _time_ms(lambda: select_contact(inst.delta_z, inst.states, inst.contacts, settings), reps)
            status = "Optimal" if plan.contact_id is not None else "Infeasible"
            res.rows.append((h, n, float(np.median(times)), float(np.percentile(times, 90)), status))
    workload = in_contact_workload(cfg, seed)
    if workload:
        times = []
        for _ in range(reps):
            for state, dz, contact in workload:
                times += _time_ms(lambda: in_contact_force(state, dz, contact, settings), 1)[0]
        res.in_contact_median_ms = float(np.median(times))
        res.in_contact_p90_ms = float(np.percentile(times, 90))
    inst = bench_instance(cfg, 16, 1, seed)
    times = []
    for _ in range(reps):
        for (_, dz), state in zip(inst.delta_z.entries, inst.states):
            times += _time_ms(lambda: in_contact_force(state, dz, inst.contacts[0], settings), 1)[0]
    res.in_contact_random_median_ms = float(np.median(times))
    if csv_path is not None:
        _write_rows(csv_path, BENCH_COLUMNS,
                    [(h, n, f"{m:.4f}", f"{p:.4f}", s) for h, n, m, p, s in res.rows])
    return res


# ---------------------------------------------------------------- max push


def push_times(cfg: ExperimentConfig) -> list:
    mp = cfg.maxpush
    cycle = cfg.gait.ss_duration + cfg.gait.ds_duration
    return [round(mp.push_start + i * cycle / mp.phases, 9) for i in range(mp.phases)]


def recovers(cfg: ExperimentConfig, wall_x: float, hands: bool, push_time: float, impulse: float,
             seed: int) -> bool:
    mp = cfg.maxpush
    d = np.asarray(mp.direction, dtype=float)
    d = d / np.linalg.norm(d)
    pushes = [Push(push_time, tuple(impulse * d), mp.push_duration)] if impulse > 0 else []
    sc = cfg.scenario(wall_x=wall_x, pushes=pushes, hands=hands,
                      duration=push_time + mp.push_duration + mp.settle, seed=seed)
    return not simulate(sc).fallen


def max_impulse(probe, resolution: float, upper: float) -> float:
    """Largest grid impulse I with probe(I) true and probe(I + resolution) false.

    Assumes probe(0) holds; returns ``upper`` when the whole bracket recovers.
    """
    n = int(round(upper / resolution))
    if probe(n * resolution):
        return n * resolution
    lo, hi = 0, n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if probe(mid * resolution):
            lo = mid
        else:
            hi = mid
    return lo * resolution


@dataclass
class MaxPushResult:
    rows: list = field(default_factory=list)  # (variant, phase, hands, impulse)

    def impulses(self, variant: str, hands: bool) -> list:
        return [r[3] for r in self.rows if r[0] == variant and r[2] == ("on" if hands else "off")]

    def improvement(self, variant: str) -> float:
        on, off = sum(self.impulses(variant, True)), sum(self.impulses(variant, False))
        if off == 0:
            return float("inf") if on > 0 else 0.0
        return (on - off) / off


def run_maxpush(cfg: ExperimentConfig, seed: int | None = None, csv_path=None, plot_path=None,
                variants=None, log=None) -> MaxPushResult:
    seed = cfg.seed if seed is None else seed
    mp = cfg.maxpush
    names = list(mp.variants) if variants is None else list(variants)
    res = MaxPushResult()
    for vi, name in enumerate(names):
        wall_x = mp.variants[name]
        for pi, t in enumerate(push_times(cfg)):
            for hands in (True, False):
                probe_seed = int(case_rng(seed, 2, vi, pi, int(hands)).integers(2**63))
                if not recovers(cfg, wall_x, hands, t, 0.0, probe_seed):
                    raise RuntimeError(f"variant {name}: robot falls without any push")
                best = max_impulse(lambda imp: recovers(cfg, wall_x, hands, t, imp, probe_seed),
                                   mp.resolution, mp.max_impulse)
                res.rows.append((name, pi, "on" if hands else "off", best))
                if log:
                    log(f"{name} phase {pi} (t={t:.2f}s) hands {'on' if hands else 'off'}: {best:.2f} N s")
    if csv_path is not None:
        _write_rows(csv_path, MAXPUSH_COLUMNS, [(v, p, h, f"{i:.2f}") for v, p, h, i in res.rows])
    if plot_path is not None:
        from .plotting import plot_maxpush
        plot_maxpush(res.rows, plot_path)
    return res
