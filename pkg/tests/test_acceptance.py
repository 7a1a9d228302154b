"""Acceptance suite: criteria 1-10, each printing one PASS/FAIL line.

The whole module takes roughly 16 minutes on one core; the push-recovery
search dominates. Run it on its own with ``pytest tests/test_acceptance.py -v``.
Later criteria reuse artifacts produced by earlier ones when run in order.
"""
import time

import numpy as np
import pytest

from handmpc import experiments as ex
from handmpc.config import ExperimentConfig
from handmpc.model import LipmState, WorldParams, delta_z, force_line, zmp_hand, zmp_lipm
from handmpc.sim import Push, simulate
from oracles import zmp_hand_direct, zmp_lipm_direct
from test_contact import check_qp1_against_scan, check_selection_against_brute_force
from test_qp import check_general_oracle

CFG = ExperimentConfig()
SEED = 2024
# reference values from the original experiments, reported for comparison only
REFERENCE_SWEEP = {"qp1": (36.1, 28.0), "qp2": (73.6, 11.7)}
REFERENCE_MAX_VIOLATION = 0.037
REFERENCE_IMPROVEMENT = {"zero": 233, "one": 156, "two": 13}

_artifacts = {}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture
def report(capsys):
    def emit(number, ok, seconds, limit, detail):
        budget = f"{seconds:.1f} s" + (f" of {limit:.0f} s" if limit else "")
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} [{budget}] {detail}")
        return ok
    return emit


def _sweep(workdir, name="sweep.csv"):
    path = workdir / name
    stats, _ = ex.run_sweep(CFG, 100_000, SEED, path)
    return stats, path


def _cached_sweep(workdir):
    if "sweep" not in _artifacts:
        t0 = time.perf_counter()
        stats, path = _sweep(workdir)
        _artifacts["sweep"] = (stats, path, time.perf_counter() - t0)
    return _artifacts["sweep"]


def test_criterion_1_identities(report):
    W = WorldParams()
    rng = np.random.default_rng(SEED)
    n = 10_000
    c = rng.uniform(-0.5, 0.5, (n, 2))
    cdd = rng.uniform(-3, 3, (n, 2))
    p = np.column_stack([rng.uniform(-1, 1, (n, 2)), rng.uniform(0.05, 1.5, n)])
    f = np.column_stack([rng.uniform(-100, 100, (n, 2)), rng.uniform(-200, 0.9 * W.weight, n)])
    dz = rng.uniform(-0.05, 0.05, (n, 2))
    t0 = time.perf_counter()
    zh, zl, d, back = (np.empty((n, 2)) for _ in range(4))
    for i in range(n):
        s = LipmState(c[i], (0.0, 0.0), cdd[i])
        zh[i] = zmp_hand(s, f[i], p[i], W)
        zl[i] = zmp_lipm(s, W)
        d[i] = delta_z(s, f[i], p[i], W)
        fxy = force_line(s, p[i], dz[i], f[i, 2], W)
        back[i] = delta_z(s, (fxy[0], fxy[1], f[i, 2]), p[i], W)
    worst_id = float(np.abs(d - (zh - zl)).max())
    worst_rt = float(np.abs(back - dz).max())
    worst_direct = max(float(np.abs(zh - zmp_hand_direct(c, cdd, f, p, W.m, W.g, W.c_z)).max()),
                       float(np.abs(zl - zmp_lipm_direct(c, cdd, W.g, W.c_z)).max()))
    seconds = time.perf_counter() - t0
    ok = worst_id <= 1e-9 and worst_rt <= 1e-9 and worst_direct <= 1e-9 and seconds < 1.0
    assert report(1, ok, seconds, 1, f"identity {worst_id:.1e} m, round trip {worst_rt:.1e} m, "
                                     f"direct evaluation {worst_direct:.1e} m over {n} tuples")


def test_criterion_2_qp_oracles(report):
    t0 = time.perf_counter()
    gap = check_general_oracle(500, SEED, iters=20000)
    mismatches, worst = check_qp1_against_scan(1000, SEED)
    seconds = time.perf_counter() - t0
    ok = gap <= 1e-6 and mismatches == 0 and worst <= 1e-5 and seconds < 30
    assert report(2, ok, seconds, 30, f"500 QPs worst gap {gap:.1e}; QP1 vs scan: {mismatches} feasibility "
                                      f"mismatches, worst relative gap {worst:.1e} over 1000")


def test_criterion_3_dominance(report, workdir):
    stats, _, seconds = _cached_sweep(workdir)
    ok = stats.dominance_failures == 0
    assert report(3, ok, seconds, None, f"{stats.dominance_failures} dominance exceptions over {stats.samples} samples")


def test_criterion_4_sweep_statistics(report, workdir):
    stats, _, seconds = _cached_sweep(workdir)
    r_success = stats.qp2_success / stats.qp1_success
    r_force = stats.qp2_mean_force / stats.qp1_mean_force
    ok = r_success >= 1.5 and r_force <= 0.75 and seconds < 300
    detail = (f"QP1 {100 * stats.qp1_success:.1f}% / {stats.qp1_mean_force:.1f} N "
              f"(reference {REFERENCE_SWEEP['qp1'][0]}% / {REFERENCE_SWEEP['qp1'][1]} N), "
              f"QP2 {100 * stats.qp2_success:.1f}% / {stats.qp2_mean_force:.1f} N "
              f"(reference {REFERENCE_SWEEP['qp2'][0]}% / {REFERENCE_SWEEP['qp2'][1]} N); "
              f"success ratio {r_success:.2f} (>= 1.5), force ratio {r_force:.2f} (<= 0.75)")
    assert report(4, ok, seconds, 300, detail)


def test_criterion_5_violation_bound(report, workdir):
    stats, _, seconds = _cached_sweep(workdir)
    ok = stats.max_bilinear_violation <= stats.violation_bound
    assert report(5, ok, seconds, None, f"max violation {stats.max_bilinear_violation:.4f} N, bound "
                                        f"{stats.violation_bound:.4f} N (reference max {REFERENCE_MAX_VIOLATION} N)")


def test_criterion_6_bench_scaling(report, workdir):
    t0 = time.perf_counter()
    res = ex.run_bench(CFG, csv_path=workdir / "bench.csv")
    seconds = time.perf_counter() - t0
    hs, ns = CFG.bench.horizons, CFG.bench.contacts
    grid = np.array([[res.median(h, n) for n in ns] for h in hs])
    mono = bool(np.all(np.diff(grid, axis=0) > 0) and np.all(np.diff(grid, axis=1) > 0))
    ratios = grid[:, -1] / grid[:, 0]
    ok = mono and bool(np.all((ratios >= 4) & (ratios <= 16))) and res.in_contact_median_ms < 1.0 and seconds < 120
    table = "; ".join(f"h={h}: " + ", ".join(f"{v:.2f}" for v in row) + " ms" for h, row in zip(hs, grid))
    _artifacts["bench_grid"] = grid
    assert report(6, ok, seconds, 120, f"monotone={mono}, {ns[-1]}/{ns[0]} ratios "
                                       f"{', '.join(f'{r:.1f}' for r in ratios)}, in-contact median "
                                       f"{res.in_contact_median_ms:.3f} ms over a pushed walk's force updates "
                                       f"(random single-step instances {res.in_contact_random_median_ms:.3f} ms); "
                                       f"{table}")


def test_bench_doubling_contacts_scales_linearly(workdir):
    """Doubling the contact count roughly doubles the selection time."""
    grid = _artifacts.get("bench_grid")
    if grid is None:
        res = ex.run_bench(CFG)
        grid = np.array([[res.median(h, n) for n in CFG.bench.contacts] for h in CFG.bench.horizons])
    doubling = grid[:, 1:] / grid[:, :-1]
    assert np.all((doubling >= 1.6) & (doubling <= 2.6)), doubling


def test_criterion_7_enumeration(report):
    t0 = time.perf_counter()
    bad, worst, feasible = check_selection_against_brute_force(200, SEED)
    seconds = time.perf_counter() - t0
    ok = bad == 0 and worst <= 1e-6 and seconds < 60
    assert report(7, ok, seconds, 60, f"{bad} disagreements over 200 instances ({feasible} with a feasible "
                                      f"contact), worst relative objective gap {worst:.1e}")


def test_criterion_8_gating(report):
    eps = CFG.mpc.slack_eps
    t0 = time.perf_counter()
    nominal = simulate(CFG.scenario(duration=20.0), keep_solutions=True)
    worst_row = max(float(np.linalg.norm(s.slack, axis=1).max()) for _, s in nominal.mpc_solutions)
    calm = worst_row <= eps and not nominal.contacts_used and not nominal.fallen
    push_t = 2.0
    pushed = simulate(CFG.scenario(duration=4.0, pushes=[Push(push_t, (40.0, 0.0))]), keep_solutions=True)
    seconds = time.perf_counter() - t0
    first = next((t for t, s in pushed.mpc_solutions if t >= push_t - 1e-9 and s.slack_norm > eps), None)
    prompt = first is not None and first <= push_t + CFG.mpc.dt_mpc + 1e-9
    delayed = [s for _, s in pushed.mpc_solutions if s.n_delay > 0]
    pinned = all(np.all(s.slack[:s.n_delay] == 0.0) for _, s in pushed.mpc_solutions)
    ok = calm and prompt and bool(delayed) and pinned and seconds < 30
    assert report(8, ok, seconds, 30, f"nominal 20 s: max slack row {worst_row:.1e} m (eps {eps:g}), contacts "
                                      f"{nominal.contacts_used}, fallen {nominal.fallen}; blocked push: slack at "
                                      f"t={first}, {len(delayed)} delayed plans, leading rows zero={pinned}")


def _maxpush(workdir, name):
    return ex.run_maxpush(CFG, SEED, workdir / f"{name}.csv", workdir / f"{name}.png")


def test_criterion_9_push_recovery(report, workdir):
    t0 = time.perf_counter()
    res = _maxpush(workdir, "maxpush")
    seconds = time.perf_counter() - t0
    _artifacts["maxpush"] = workdir / "maxpush.csv"
    paired = all(on >= off for v in ("zero", "one")
                 for on, off in zip(res.impulses(v, True), res.impulses(v, False)))
    imp = {v: res.improvement(v) for v in CFG.maxpush.variants}
    ordered = imp["zero"] >= imp["one"] >= imp["two"]
    ok = paired and ordered and imp["zero"] >= 0.5 and seconds < 900
    detail = ", ".join(f"{v}-step {100 * imp[v]:.0f}% (reference {REFERENCE_IMPROVEMENT[v]}%)" for v in imp)
    table = "; ".join(f"{v} on {res.impulses(v, True)} off {res.impulses(v, False)}" for v in imp)
    assert report(9, ok, seconds, 900, f"paired={paired}, ordered={ordered}; {detail}; {table}")


def test_criterion_10_determinism(report, workdir):
    t0 = time.perf_counter()
    _, first, _ = _cached_sweep(workdir)
    _, again = _sweep(workdir, "sweep_again.csv")
    sweep_same = first.read_bytes() == again.read_bytes()
    inst_same = ex.bench_instances_text(CFG, SEED) == ex.bench_instances_text(CFG, SEED)
    if "maxpush" not in _artifacts:
        _maxpush(workdir, "maxpush")
        _artifacts["maxpush"] = workdir / "maxpush.csv"
    _maxpush(workdir, "maxpush_again")
    push_same = _artifacts["maxpush"].read_bytes() == (workdir / "maxpush_again.csv").read_bytes()
    seconds = time.perf_counter() - t0
    ok = sweep_same and inst_same and push_same
    assert report(10, ok, seconds, None, f"sweep CSV identical={sweep_same}, bench instances identical={inst_same}, "
                                         f"max-push CSV identical={push_same}")
