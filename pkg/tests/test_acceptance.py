"""Acceptance criteria 1 to 9.

Every test appends one ``criterion N: PASS|FAIL ...`` line to ``RESULTS`` and
prints it; conftest echoes the collected lines in the terminal summary.
"""

import json

import numpy as np

from sampling import random_q_ext, random_q_ss
from test_hybrid import holding_input, symmetric_stance
from test_model import fd_gradient, potential
from test_qp import box_rows, random_box_qp
from thrustwalk.cli import EXIT_OK, read_log
from thrustwalk.erg import VLIPModel, simulate_vlip
from thrustwalk.hybrid import COLUMNS, PHASE_DS, ds_kkt, impact_map, step_ss_array
from thrustwalk.model import ExtState, SSState, chain, energies, ss_matrices
from thrustwalk.qp import OPTIMAL, projected_gradient, solve_dense_qp

RESULTS = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_1_five_step_walk(walk_runs):
    run = walk_runs["thrust"]
    rep = run.report
    pos, vel = max(rep.step_pos_error, default=np.inf), max(rep.step_vel_error, default=np.inf)
    ok = (run.exit_code == EXIT_OK and rep.status == "ok" and rep.completed_steps == 5
          and pos < 1e-3 and vel < 1e-2 and run.elapsed < 60.0)
    report(1, ok, f"steps {rep.completed_steps}/5, status {rep.status}, max |q err| {pos:.2e} rad, "
                  f"max |dq err| {vel:.2e} rad/s, {run.elapsed:.1f} s")


def test_criterion_2_ground_contact(walk_runs):
    header, rows = read_log(walk_runs["thrust"].log_path)
    mu = header["mu_s"]
    col = {c: i for i, c in enumerate(COLUMNS)}
    ds = [r for r in rows if r[col["phase"]] == PHASE_DS]
    bad, worst = 0, 0.0
    for r in ds:
        for t, n in (("lam_T1", "lam_N1"), ("lam_T2", "lam_N2")):
            lt, ln = r[col[t]], r[col[n]]
            if not ln > 0 or abs(lt / ln) >= mu:
                bad += 1
            else:
                worst = max(worst, abs(lt / ln))
    ok = len(ds) > 0 and bad == 0
    report(2, ok, f"{len(ds)} DS samples, {bad} violations, max |lam_T/lam_N| {worst:.3f} (mu_s {mu})")


def test_criterion_3_thrust_ablation(walk_runs):
    a, b = walk_runs["thrust"].report, walk_runs["no_thrust"].report
    failed = b.status != "ok" or b.qp_fallbacks > 0
    ok = failed or b.mean_terminal_error > a.mean_terminal_error
    report(3, ok, f"mean terminal error with thrust {a.mean_terminal_error:.3e}, "
                  f"without {b.mean_terminal_error:.3e} (status {b.status})")


def test_criterion_4_erg_effectiveness(params):
    model = VLIPModel.for_robot(params, omega=20.0, u_v_bounds=(0.0, 15.0))
    free = simulate_vlip(model, 0.40, 0.43, 0.4, governed=False)
    gov = simulate_vlip(model, 0.40, 0.43, 0.4, governed=True, kappa=1e4)
    err = abs(gov.w[-1] - 0.43)
    ok = free.violations >= 1 and gov.violations == 0 and err < 1e-3
    report(4, ok, f"ungoverned violations {free.violations}, governed {gov.violations}, "
                  f"final |w - r| {err:.1e}")


def test_criterion_5_impact_invariants(params, rng):
    worst_v, energy_fail = 0.0, 0
    for _ in range(1000):
        pre = ExtState(random_q_ext(rng), rng.normal(size=7))
        res = impact_map(pre, params)
        post = ExtState(pre.q, res.dq_e_plus)
        J = chain(params, True).jacobians(pre.q)[[4, 5]].reshape(4, 7)
        worst_v = max(worst_v, np.linalg.norm(J @ post.dq))
        if energies(post, params)[0] > energies(pre, params)[0]:
            energy_fail += 1
    zero = impact_map(ExtState(random_q_ext(rng), np.zeros(7)), params).dq_e_plus
    ok = worst_v < 1e-9 and energy_fail == 0 and np.array_equal(zero, np.zeros(7))
    report(5, ok, f"1000 states, max |J dq+| {worst_v:.1e}, {energy_fail} energy increases, "
                  f"zero maps to zero {np.array_equal(zero, np.zeros(7))}")


def test_criterion_6_dynamics_oracles(params, rng):
    grav = 0.0
    for _ in range(100):
        q = random_q_ss(rng)
        H = ss_matrices(SSState(q, np.zeros(5)), params).H
        g = fd_gradient(lambda z: potential(z, params, False), q)
        grav = max(grav, np.linalg.norm(H - g) / np.linalg.norm(g))
    x = np.concatenate([random_q_ss(rng), 0.5 * rng.normal(size=5)])
    E0 = sum(energies(SSState.from_x(x), params))
    for _ in range(1000):
        x = step_ss_array(x, np.zeros(4), 1e-4, params)
    drift = abs(sum(energies(SSState.from_x(x), params)) - E0) / abs(E0)
    skew = 0.0
    for floating, sample in ((False, random_q_ss), (True, random_q_ext)):
        ch = chain(params, floating)
        for _ in range(50):
            q = sample(rng)
            dq = 3 * rng.normal(size=q.size)
            N = ch.mass_derivative(q) @ dq - 2 * ch.coriolis_matrix(q, dq)
            skew = max(skew, np.abs(N + N.T).max())
    ok = grav < 1e-6 and drift < 1e-6 and skew < 1e-9
    report(6, ok, f"gravity rel err {grav:.1e}, energy drift {drift:.1e}, skew residual {skew:.1e}")


def test_criterion_7_ds_fidelity(params, walk_runs):
    summary = json.loads((walk_runs["thrust"].log_path.parent / "thrust_summary.json").read_text())
    walk_drift = max(s["foot_drift"] for s in summary["steps"])
    q = symmetric_stance(params)
    _, lam, _ = ds_kkt(q, np.zeros(7), holding_input(q, params), params)
    force_err = abs(lam[1] + lam[3] - params.weight)
    ok = walk_drift < 1e-6 and force_err < 1e-6
    report(7, ok, f"max foot drift per DS phase {walk_drift:.1e} m, "
                  f"static normal-force error {force_err:.1e} N")


def test_criterion_8_qp_oracle(rng):
    dx, kkt, bad = 0.0, 0.0, 0
    for _ in range(100):
        n = int(rng.integers(1, 21))
        H, f, lb, ub = random_box_qp(rng, n)
        G, h = box_rows(lb, ub)
        res = solve_dense_qp(H, f, G, h)
        bad += res.status != OPTIMAL
        dx = max(dx, np.abs(res.x - projected_gradient(H, f, lb, ub)).max())
        kkt = max(kkt, res.kkt_residual)
    ok = bad == 0 and dx < 1e-6 and kkt < 1e-8
    report(8, ok, f"100 QPs, max |x - x_pg| {dx:.1e}, max KKT residual {kkt:.1e}")


def test_criterion_9_limit_cycle(walk_runs):
    _, rows = read_log(walk_runs["thrust"].log_path)
    col = {c: i for i, c in enumerate(COLUMNS)}
    names = ["q_T", "q_1R", "q_1L", "q_2R", "q_2L"]
    idx = [col[c] for c in names] + [col["d" + c] for c in names]
    starts = {}
    for r in rows:
        if r[col["phase"]] == "SS" and r[col["step"]] not in starts:
            starts[r[col["step"]]] = np.array([r[i] for i in idx])
    # return samples at the start of steps 2 to 5 (and the post-walk start)
    ks = [k for k in sorted(starts) if k >= 1]
    d = [np.linalg.norm(starts[b] - starts[a]) for a, b in zip(ks, ks[1:])]
    worst = max(d) if d else np.inf
    ok = len(d) >= 3 and worst < 1e-3
    report(9, ok, f"{len(ks)} return samples, max successive distance {worst:.1e}")

