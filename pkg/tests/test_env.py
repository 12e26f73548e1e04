import numpy as np
import pytest

from bipedlab.env import EnvError, EpisodeConfig, PointMassEnv, WalkerEnv
from bipedlab.rewards import preset


def make_env(model, lib, name="gait2", num=1, seed=0, **ep_kw):
    return WalkerEnv(model, preset(name), EpisodeConfig(**ep_kw),
                     library=lib, num_envs=num, seed=seed)


def test_reset_deterministic(model, tiny_library):
    a = make_env(model, tiny_library, seed=42).reset_all()
    b = make_env(model, tiny_library, seed=42).reset_all()
    assert np.array_equal(a, b)
    c = make_env(model, tiny_library, seed=43).reset_all()
    assert not np.array_equal(a, c)


def test_observation_schema(model, tiny_library):
    env = make_env(model, tiny_library)
    obs = env.reset_all()
    assert obs.shape == (1, 38)
    # gravity direction at zero pitch is (0, -1) before normalization
    assert obs[0, 4] == 0.0
    assert obs[0, 5] == -1.0
    # clock input equals the phase used for the reward query
    assert obs[0, 0] == env.phase[0]
    # yaw-rate command placeholder is zero
    assert obs[0, 7] == 0.0


def test_zero_action_keeps_standing(model, tiny_library):
    env = make_env(model, tiny_library, num=1, seed=1)
    env.reset_all()
    for _ in range(50):
        _, _, done, info = env.step(np.zeros((1, 10)))
        assert not done[0]


def test_huge_impulse_terminates_with_penalty(model, tiny_library):
    env = make_env(model, tiny_library, num=1, seed=2)
    env.reset_all()
    env.queue_impulse(np.array([True]), linear_x=500.0)
    done_seen = False
    for _ in range(100):
        _, _, done, info = env.step(np.zeros((1, 10)))
        if done[0]:
            done_seen = True
            assert info["fell"][0]
            assert info["terms"]["termination"][0] == -30.0
            break
    assert done_seen


def test_clock_period(model):
    # no library: the clock runs at the configured default stride period
    env = WalkerEnv(model, preset("gait3"), EpisodeConfig(default_t_gait=0.7),
                    num_envs=1, seed=3)
    env.reset_all()
    phi0 = env.phase[0]
    for _ in range(35):  # 35 * 0.02 s = 0.7 s = exactly one period
        env.step(np.zeros((1, 10)))
    assert abs(env.phase[0] - phi0) < 1e-9


def test_decimation_exact(model, tiny_library):
    env = make_env(model, tiny_library)
    env.reset_all()
    for _ in range(7):
        env.step(np.zeros((1, 10)))
    assert env.sim.t[0] == pytest.approx(7 * 0.02, abs=1e-12)
    assert env.episode_len[0] == 7


def test_requires_library_for_imitation(model):
    with pytest.raises(EnvError, match="gait library"):
        WalkerEnv(model, preset("gait1"), EpisodeConfig(), library=None)
    # gait3 has no imitation weights: must start without a library
    WalkerEnv(model, preset("gait3"), EpisodeConfig(), library=None)


def test_nonfinite_action_rejected(model, tiny_library):
    env = make_env(model, tiny_library)
    env.reset_all()
    bad = np.zeros((1, 10))
    bad[0, 3] = np.nan
    with pytest.raises(EnvError, match="non-finite"):
        env.step(bad)


def test_gait1_reward_bounded(model, tiny_library):
    env = make_env(model, tiny_library, name="gait1", num=4, seed=5)
    env.reset_all()
    rng = np.random.default_rng(0)
    for _ in range(30):
        _, r, _, _ = env.step(rng.normal(0, 1, (4, 10)))
        assert np.all(r <= 10.0 + 1e-12)
        assert np.all(r >= 0.0)


def test_step_deterministic_full_pipeline(model, tiny_library):
    def run():
        env = make_env(model, tiny_library, num=3, seed=9)
        env.reset_all()
        rng = np.random.default_rng(1)
        out = []
        for _ in range(25):
            obs, r, done, _ = env.step(rng.normal(0, 0.5, (3, 10)))
            out.append((obs.copy(), r.copy(), done.copy()))
        return out

    for (oa, ra, da), (ob, rb, db) in zip(run(), run()):
        assert np.array_equal(oa, ob)
        assert np.array_equal(ra, rb)
        assert np.array_equal(da, db)


def test_randomization_identity(model, tiny_library):
    def run(randomize):
        env = make_env(model, tiny_library, num=2, seed=4)
        if randomize:
            env.apply_randomization(seed=0, friction=(0.8, 0.8),
                                    mass_scale=(1.0, 1.0), gain_scale=(1.0, 1.0),
                                    noise_vel_std=0.0, noise_pos_std=0.0)
        env.reset_all()
        rng = np.random.default_rng(2)
        for _ in range(20):
            obs, r, _, _ = env.step(rng.normal(0, 0.3, (2, 10)))
        return obs, r

    oa, ra = run(False)
    ob, rb = run(True)
    assert np.array_equal(oa, ob)
    assert np.array_equal(ra, rb)


def test_randomization_reproducible(model, tiny_library):
    env = make_env(model, tiny_library, num=8)
    rec1 = env.apply_randomization(seed=77, mass_scale=(0.9, 1.1))
    env2 = make_env(model, tiny_library, num=8)
    rec2 = env2.apply_randomization(seed=77, mass_scale=(0.9, 1.1))
    assert np.array_equal(rec1["mass_scale"], rec2["mass_scale"])
    assert rec1["mass_scale"].min() >= 0.9
    assert rec1["mass_scale"].max() <= 1.1
    assert not np.allclose(rec1["mass_scale"], 1.0)


def test_command_resampling(model, tiny_library):
    env = make_env(model, tiny_library, num=16, seed=6, command_resample_s=0.2,
                   t_max=100.0)
    env.reset_all()
    first = env.command.copy()
    for _ in range(30):  # 0.6 s >> resample interval
        env.step(np.zeros((16, 10)))
    assert not np.array_equal(first, env.command)


def test_point_mass_env():
    env = PointMassEnv(num_envs=4, seed=0)
    obs = env.reset_all()
    assert obs.shape == (4, 3)
    obs, r, done, info = env.step(np.ones((4, 1)))
    assert r.shape == (4,)
    assert np.all(r <= 1.0)
    # velocity integrates the clipped action
    assert np.allclose(env.v, obs[:, 0])
