import numpy as np
import pytest

from bipedlab import rewards
from bipedlab.rewards import (RewardBreakdown, RewardConfigError, TERM_NAMES,
                              imitation_feet, imitation_joints, preset,
                              tracking_exp, with_model_limits)


def make_inputs(model, cfg, **over):
    nj, nf = model.nj, 2
    base = dict(
        joint_pos=np.tile(model.nominal_pose, (1, 1)),
        joint_vel=np.zeros((1, nj)),
        base_vel=np.zeros((1, 2)),
        pitch=np.zeros(1),
        yaw_rate=np.zeros(1),
        foot_rel_com=np.zeros((1, nf, 2)),
        foot_normal_force=np.array([[300.0, 300.0]]),
        touchdown_airtime=np.zeros((1, nf)),
        touchdown_count=np.zeros((1, nf)),
        tau=np.zeros((1, nj)),
        action=np.zeros((1, nj)),
        prev_action=np.zeros((1, nj)),
        command_v=np.zeros(1),
        command_yaw=np.zeros(1),
        fell=np.zeros(1, dtype=bool),
        ref_joints=np.tile(model.nominal_pose, (1, 1)),
        ref_feet=np.zeros((1, nf, 2)),
    )
    base.update(over)
    return base


# ------------------------------------------------------------ closed forms

def test_imitation_joints_perfect():
    q = np.array([0.1, -0.2, 0.3])
    assert imitation_joints(q, q, 5.0) == pytest.approx(5.0, abs=1e-12)


def test_imitation_joints_unit_exponent():
    # squared error exactly equal to the 0.2 denominator -> w / e
    err = np.sqrt(0.2)
    v = imitation_joints(np.array([err]), np.array([0.0]), 5.0)
    assert v == pytest.approx(5.0 / np.e, abs=1e-12)
    # the quoted rounded error value
    v = imitation_joints(np.array([0.447214]), np.array([0.0]), 5.0)
    assert v == pytest.approx(1.83940, abs=1e-4)


def test_imitation_joints_zero_weight():
    rng = np.random.default_rng(0)
    for _ in range(10):
        q, qr = rng.normal(size=10), rng.normal(size=10)
        assert imitation_joints(q, qr, 0.0) == 0.0


def test_imitation_feet_closed_forms():
    x = np.zeros((2, 2))
    assert imitation_feet(x, x, 5.0) == pytest.approx(5.0, abs=1e-12)
    x_ref = np.array([[0.05, 0.0], [0.0, -0.05]])  # total L1 error 0.1
    assert imitation_feet(x, x_ref, 5.0) == pytest.approx(5.0 / np.e, abs=1e-12)
    assert imitation_feet(x, x_ref, 5.0) == pytest.approx(1.83940, abs=1e-4)


def test_imitation_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        imitation_joints(np.zeros(3), np.zeros(4), 1.0)
    with pytest.raises(ValueError, match="shapes differ"):
        imitation_feet(np.zeros((2, 2)), np.zeros((1, 2)), 1.0)


def test_torques_table_value(model):
    cfg = with_model_limits(preset("gait2"), model)
    tau = np.zeros((1, model.nj))
    tau[0, 0] = 100.0  # ||tau||^2 = 1e4
    terms = rewards.evaluate_batch(cfg, **make_inputs(model, cfg, tau=tau))
    assert terms["torques"][0] == pytest.approx(-0.08, abs=1e-12)


def test_tracking_perfect_velocity(model):
    cfg = with_model_limits(preset("gait2"), model)
    inp = make_inputs(model, cfg, base_vel=np.array([[0.7, 0.0]]),
                      command_v=np.array([0.7]))
    terms = rewards.evaluate_batch(cfg, **inp)
    assert terms["tracking_lin_vel"][0] == pytest.approx(1.5, abs=1e-12)


def test_no_fly_single_support(model):
    for name, expect in [("gait2", 0.1), ("gait3", 0.4)]:
        cfg = with_model_limits(preset(name), model)
        both = rewards.evaluate_batch(cfg, **make_inputs(model, cfg))
        assert both["no_fly"][0] == 0.0
        single = rewards.evaluate_batch(cfg, **make_inputs(
            model, cfg, foot_normal_force=np.array([[300.0, 0.05]])))
        assert single["no_fly"][0] == pytest.approx(expect, abs=1e-12)


def test_feet_air_time_touchdown_credit(model):
    cfg = with_model_limits(preset("gait2"), model)
    inp = make_inputs(model, cfg,
                      touchdown_airtime=np.array([[0.45, 0.0]]),
                      touchdown_count=np.array([[1.0, 0.0]]))
    terms = rewards.evaluate_batch(cfg, **inp)
    assert terms["feet_air_time"][0] == pytest.approx(3.0 * (0.45 - 0.3), abs=1e-12)


# ----------------------------------------------------------------- presets

def test_preset_gait1_exact():
    p = preset("gait1")
    assert p.imitation_joints == 5.0
    assert p.imitation_feet == 5.0
    for t in TERM_NAMES:
        if not t.startswith("imitation"):
            assert p.weight(t) == 0.0


def test_preset_gait2_exact():
    p = preset("gait2")
    expect = {"imitation_joints": 5.0, "imitation_feet": 0.0,
              "tracking_lin_vel": 1.5, "tracking_ang_vel": 1.5, "no_fly": 0.1,
              "feet_air_time": 3.0, "action_rate": -3e-3,
              "motor_vel_limit": -0.01, "termination": -30.0,
              "motor_pos_limit": -0.95, "orientation": -1.0,
              "lin_vel_z": -1.5, "torques": -8e-6}
    for t, v in expect.items():
        assert p.weight(t) == v, t


def test_preset_gait3_exact():
    p = preset("gait3")
    expect = {"imitation_joints": 0.0, "imitation_feet": 0.0,
              "tracking_lin_vel": 0.4, "tracking_ang_vel": 0.3, "no_fly": 0.4,
              "feet_air_time": 3.0, "action_rate": -5e-4,
              "motor_vel_limit": -0.01, "termination": -30.0,
              "motor_pos_limit": -0.95, "orientation": -1.0,
              "lin_vel_z": -1.5, "torques": -8e-6}
    for t, v in expect.items():
        assert p.weight(t) == v, t


def test_unknown_preset_lists_valid():
    with pytest.raises(RewardConfigError, match="gait1"):
        preset("gait9")


# -------------------------------------------------------------- properties

def test_exponential_terms_bounded_and_monotone():
    errs = np.linspace(0.0, 3.0, 40)
    vals = [imitation_joints(np.array([e]), np.array([0.0]), 5.0) for e in errs]
    assert vals[0] == 5.0
    assert all(v > 0 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))
    tv = [tracking_exp(0.0, e, 1.5, 0.25) for e in errs]
    assert tv[0] == 1.5
    assert all(a > b for a, b in zip(tv, tv[1:]))


def test_penalties_nonpositive_random(model):
    rng = np.random.default_rng(12)
    for name in ("gait1", "gait2", "gait3"):
        cfg = with_model_limits(preset(name), model)
        for _ in range(25):
            inp = make_inputs(
                model, cfg,
                joint_pos=rng.normal(0, 2, (1, model.nj)),
                joint_vel=rng.normal(0, 20, (1, model.nj)),
                base_vel=rng.normal(0, 2, (1, 2)),
                pitch=rng.normal(0, 1, 1),
                tau=rng.normal(0, 200, (1, model.nj)),
                action=rng.normal(0, 2, (1, model.nj)),
                prev_action=rng.normal(0, 2, (1, model.nj)),
                fell=rng.random(1) < 0.5,
            )
            terms = rewards.evaluate_batch(cfg, **inp)
            for t in rewards.PENALTY_TERMS:
                assert terms[t][0] <= 0.0, (name, t)


def test_gait1_total_is_imitation_only(model):
    cfg = with_model_limits(preset("gait1"), model)
    rng = np.random.default_rng(5)
    inp = make_inputs(model, cfg,
                      joint_vel=rng.normal(0, 30, (1, model.nj)),
                      tau=rng.normal(0, 300, (1, model.nj)),
                      base_vel=np.array([[2.0, -1.0]]),
                      fell=np.array([True]))
    terms = rewards.evaluate_batch(cfg, **inp)
    for t in TERM_NAMES:
        if not t.startswith("imitation"):
            assert terms[t][0] == 0.0, t


def test_breakdown_sum_matches(model):
    cfg = with_model_limits(preset("gait2"), model)
    terms = rewards.evaluate_batch(cfg, **make_inputs(model, cfg))
    bd = RewardBreakdown.from_terms({k: float(v[0]) for k, v in terms.items()})
    assert bd.total == pytest.approx(sum(bd.terms.values()), abs=1e-12)


def test_evaluate_batch_pure(model):
    cfg = with_model_limits(preset("gait3"), model)
    rng = np.random.default_rng(8)
    inp = make_inputs(model, cfg, joint_vel=rng.normal(0, 5, (1, model.nj)))
    a = rewards.evaluate_batch(cfg, **inp)
    b = rewards.evaluate_batch(cfg, **inp)
    for t in TERM_NAMES:
        assert np.array_equal(a[t], b[t])


def test_single_instance_evaluate(model):
    # wrapper over a real settled SimState
    from conftest import settled_standing_sim
    sim = settled_standing_sim(model, settle_s=0.3)
    st = sim.state(0)
    cfg = with_model_limits(preset("gait2"), model)
    ref = (model.nominal_pose.copy(), st.foot_rel_com.copy(), 0.7)
    bd = rewards.evaluate(st, np.zeros(model.nj), np.zeros(model.nj),
                          (0.0, 0.0), ref, cfg)
    assert set(bd.terms) == set(TERM_NAMES)
    assert bd.total == pytest.approx(sum(bd.terms.values()), abs=1e-12)
    assert bd.terms["no_fly"] == 0.0  # both feet loaded while standing
    assert bd.terms["imitation_feet"] == 0.0  # dropped in gait2
