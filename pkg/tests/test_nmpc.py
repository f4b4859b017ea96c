from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from test_hybrid import holding_input, symmetric_stance
from thrustwalk.erg import SSController
from thrustwalk.hybrid import WalkConfig, ds_kkt, impact_map, simulate_ss_phase, swap_legs
from thrustwalk.model import FOOT_L, FOOT_R, ExtState, SSState, chain, ds_input_map, foot_kinematics, lift
from thrustwalk.nmpc import (
    NU,
    NX,
    DSController,
    NMPCConfig,
    assemble_qp,
    build_reference,
    discretize_linearize,
    input_bounds,
    lift_target,
    linearize,
    one_step,
    predict_lambda,
    solve_qp,
)
from thrustwalk.qp import solve_dense_qp


@pytest.fixture(scope="module")
def post_impact(params, spec):
    """First DS entry state of the default gait with its reference and previous input."""
    cfg = WalkConfig(params, spec)
    res = simulate_ss_phase(spec.start_state, SSController(spec, params, cfg.erg), cfg)
    pre = lift(SSState.from_x(res.event.x), params)
    post = swap_legs(ExtState(pre.q, impact_map(pre, params).dq_e_plus))
    target = lift_target(spec.x_s0, foot_kinematics(post, params).p[:2], params)
    return post.x, build_reference(post, target, 10), np.concatenate([res.u_last, [0.0]])


def static_state(params):
    return np.concatenate([symmetric_stance(params), np.zeros(7)])


# ---- reference ---------------------------------------------------------------------

def test_reference_constant_when_endpoints_agree(rng):
    a = rng.normal(size=NX)
    assert np.array_equal(build_reference(a, a, 10).r, np.tile(a, (11, 1)))


def test_reference_endpoints_and_midpoint(rng):
    a, b = rng.normal(size=NX), rng.normal(size=NX)
    one = build_reference(a, b, 1).r
    assert one.shape == (2, NX) and np.array_equal(one[0], a) and np.array_equal(one[1], b)
    ref = build_reference(a, b, 10)
    assert ref.horizon == 10
    assert_allclose(ref.r[5], 0.5 * (a + b), atol=1e-15)
    with pytest.raises(ValueError):
        build_reference(a, b, 0)


def test_lift_target_places_stance_foot(params, spec):
    x = lift_target(spec.x_s0, (0.3, 0.0), params)
    fk = foot_kinematics(ExtState.from_x(x), params)
    assert_allclose(fk.p[:2], [0.3, 0.0], atol=1e-14)
    assert_allclose(fk.J[:2] @ x[7:], 0.0, atol=1e-13)


# ---- linearization ----------------------------------------------------------------

@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_affine_model_exact_at_linearization_point(params, post_impact, method):
    x, _, eta = post_impact
    A, B, c = discretize_linearize(x, eta, 1e-3, params, method)
    assert_allclose(A @ x + B @ eta + c, one_step(x, eta, 1e-3, params, method), atol=1e-14)


def test_affine_model_error_is_second_order(params, post_impact, rng):
    x, _, eta = post_impact
    A, B, c = discretize_linearize(x, eta, 1e-3, params)
    d = rng.normal(size=NX)
    d /= np.linalg.norm(d)
    errs = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        z = x + eps * d
        errs.append(np.linalg.norm(one_step(z, eta, 1e-3, params) - (A @ z + B @ eta + c)))
    for e1, e2 in zip(errs, errs[1:]):
        assert 3.5 < e1 / e2 < 4.5


def test_input_matrix_matches_constrained_projection(params, post_impact):
    """Euler B block: dt times the constrained acceleration response to each input."""
    x, _, eta = post_impact
    q = x[:7]
    ch = chain(params, True)
    J = ch.jacobians(q)
    D = ch.mass_matrix(J)
    Jc = J[[FOOT_R, FOOT_L]].reshape(4, 7)
    Di = np.linalg.inv(D)
    P = Di - Di @ Jc.T @ np.linalg.solve(Jc @ Di @ Jc.T, Jc @ Di)
    expected = 1e-3 * P @ ds_input_map(q, params, J)
    _, B, _ = discretize_linearize(x, eta, 1e-3, params)
    assert_allclose(B[:7], 0.0, atol=0.0)
    assert_allclose(B[7:], expected, atol=1e-12)


def test_force_sensitivities_match_finite_differences(params, post_impact):
    x, _, eta = post_impact
    lam, L_eta, L_x = predict_lambda(x, eta, params)
    assert_allclose(lam, ds_kkt(x[:7], x[7:], eta, params)[1], atol=1e-12)
    h = 1e-4
    for j in range(NU):
        e = np.zeros(NU)
        e[j] = h
        fd = (ds_kkt(x[:7], x[7:], eta + e, params)[1] - ds_kkt(x[:7], x[7:], eta - e, params)[1]) / (2 * h)
        assert_allclose(L_eta[:, j], fd, atol=1e-6)
    for i in range(NX):
        e = np.zeros(NX)
        e[i] = 1e-5
        fd = (ds_kkt((x + e)[:7], (x + e)[7:], eta, params)[1]
              - ds_kkt((x - e)[:7], (x - e)[7:], eta, params)[1]) / 2e-5
        assert_allclose(L_x[:, i], fd, atol=1e-5 * max(1.0, np.abs(fd).max()))


def test_static_stance_predicted_forces(params):
    x = static_state(params)
    lam, L_eta, _ = predict_lambda(x, holding_input(x[:7], params), params)
    assert lam[1] + lam[3] == pytest.approx(params.weight, abs=1e-6)
    # pushing into the ground along the torso axis raises the total normal force
    down = np.zeros(NU)
    down[4] = -1.0
    assert (L_eta @ down)[[1, 3]].sum() > 0


def test_no_thrust_zeroes_thrust_column(params, post_impact):
    x, _, eta = post_impact
    cfg = NMPCConfig(use_thrust=False)
    lin = linearize(x, eta, cfg, params)
    assert np.all(lin.B[:, 4] == 0.0) and np.all(lin.L_eta[:, 4] == 0.0)
    lo, hi = input_bounds(cfg, params)
    assert lo[4] == hi[4] == 0.0


# ---- QP assembly ---------------------------------------------------------------------

def test_unconstrained_qp_is_least_squares(params, post_impact):
    x, ref, eta = post_impact
    cfg = NMPCConfig()
    lin = linearize(x, eta, cfg, params)
    prob = assemble_qp(ref.r[1:], lin, cfg, params, constrained=False)
    z = solve_qp(prob).eta.reshape(-1)
    n = prob.n_steps
    W = np.tile(cfg.state_weights(), n)
    W[-NX:] *= cfg.terminal_weight
    Dm = np.eye(n * NU) - np.eye(n * NU, k=-NU)
    d0 = np.zeros(n * NU)
    d0[:NU] = eta
    rows = np.vstack([np.sqrt(W)[:, None] * prob.Sx, np.sqrt(cfg.w_eta) * Dm])
    rhs = np.concatenate([np.sqrt(W) * (ref.r[1:].reshape(-1) - prob.sx), np.sqrt(cfg.w_eta) * d0])
    ls = np.linalg.lstsq(rows, rhs, rcond=None)[0]
    assert_allclose(z, ls, atol=1e-6 * max(1.0, np.abs(ls).max()))


def test_equilibrium_reference_holds_input(params):
    x = static_state(params)
    eta = holding_input(x[:7], params)
    cfg = NMPCConfig()
    lin = linearize(x, eta, cfg, params)
    prob = assemble_qp(np.tile(x, (10, 1)), lin, cfg, params, constrained=False)
    plan = solve_qp(prob)
    assert_allclose(plan.eta - eta, 0.0, atol=1e-6)
    assert_allclose(plan.states - x, 0.0, atol=1e-8)


def test_friction_rows_hold_at_solution(params, post_impact):
    x, ref, eta = post_impact
    cfg = NMPCConfig()
    prob = assemble_qp(ref.r[1:], linearize(x, eta, cfg, params), cfg, params)
    plan = solve_qp(prob)
    assert plan.status == "optimal" and plan.kkt_residual < 1e-8
    z = plan.eta.reshape(-1)
    slack = prob.G @ z - prob.h
    rows = np.array([k.startswith("friction") or k == "normal" for k in prob.row_kind])
    assert slack[rows].max() <= 1e-9
    assert plan.contact_ok
    assert plan.friction_ratio().max() <= params.mu_s * cfg.friction_margin + 1e-9
    lo, hi = input_bounds(cfg, params)
    assert np.all(plan.eta >= lo - 1e-12) and np.all(plan.eta <= hi + 1e-12)


def test_last_sample_is_single_step_least_squares(params, post_impact):
    x, ref, eta = post_impact
    cfg = NMPCConfig()
    lin = linearize(x, eta, cfg, params)
    prob = assemble_qp(ref.r[-1:], lin, cfg, params, constrained=False)
    assert prob.n_steps == 1
    z = solve_dense_qp(prob.H, prob.f).x
    W = cfg.state_weights() * cfg.terminal_weight
    rows = np.vstack([np.sqrt(W)[:, None] * lin.B, np.sqrt(cfg.w_eta) * np.eye(NU)])
    rhs = np.concatenate([np.sqrt(W) * (ref.r[-1] - lin.A @ x - lin.c), np.sqrt(cfg.w_eta) * eta])
    assert_allclose(z, np.linalg.lstsq(rows, rhs, rcond=None)[0], atol=1e-8)


def test_controller_is_deterministic_and_bounded(params, post_impact):
    x, ref, eta = post_impact
    cfg = NMPCConfig()
    a = DSController(ref, params, cfg, eta.copy())
    b = DSController(ref, params, cfg, eta.copy())
    ua, pa, fa = a.step(x, 0)
    ub, pb, fb = b.step(x, 0)
    assert np.array_equal(ua, ub) and np.array_equal(pa.eta, pb.eta) and fa == fb is False
    lo, hi = input_bounds(cfg, params)
    assert np.all(ua >= lo) and np.all(ua <= hi)
    with pytest.raises(ValueError):
        a.step(x, 10)


def test_nominal_ds_terminal_error(walk_runs):
    report = walk_runs["thrust"].report
    assert all(e < 1e-3 for e in report.step_terminal_error)


def test_thrust_ablation_increases_terminal_error(walk_runs):
    with_thrust = walk_runs["thrust"].report
    without = walk_runs["no_thrust"].report
    assert without.mean_terminal_error > with_thrust.mean_terminal_error
    assert max(without.ds_max_thrust) == 0.0


def test_config_override_shapes(params, post_impact):
    x, ref, eta = post_impact
    cfg = replace(NMPCConfig(), horizon=4)
    prob = assemble_qp(ref.r[1:5], linearize(x, eta, cfg, params), cfg, params)
    assert prob.H.shape == (4 * NU, 4 * NU) and prob.Sl.shape == (16, 4 * NU)
