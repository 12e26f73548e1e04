"""Vectorized RL environment: 50 Hz actions decimated to 1 kHz PD control.

Observation layout (38 values, fixed order, each divided by its schema
constant): clock phase (1), base linear velocity (2), pitch rate (1), gravity
direction in the torso frame (2), command [forward velocity, yaw-rate
placeholder] (2), joint positions (10), joint velocities (10), previous
action (10). The clock phase is the same phase used for the gait-library
reward queries, advancing by control_dt / T_gait(command) per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rewards as rw
from .gaitlib import GaitLibrary
from .model import RobotModel
from .sim import DT_INNER, PlanarSim

OBS_SCHEMA_VERSION = 1


def observation_divisors(nj: int) -> np.ndarray:
    """Fixed normalization constants, part of the versioned schema."""
    return np.concatenate([
        [1.0],  # clock
        [1.0, 1.0],  # base linear velocity, m/s
        [4.0],  # pitch rate, rad/s
        [1.0, 1.0],  # gravity direction (unit)
        [1.0, 1.0],  # command
        np.ones(nj),  # joint positions, rad
        np.full(nj, 10.0),  # joint velocities, rad/s
        np.ones(nj),  # previous action
    ])


@dataclass
class EpisodeConfig:
    t_max: float = 20.0
    command_resample_s: float = 5.0
    command_range: tuple[float, float] = (0.0, 1.0)
    reset_joint_noise: float = 0.05  # rad
    action_scale: float = 0.5  # rad per action unit
    decimation: int = 20  # inner steps per control step (50 Hz)
    default_t_gait: float = 0.7  # clock period when no library is loaded, s
    # domain randomization ranges (degenerate by default)
    rand_friction: tuple[float, float] = (0.8, 0.8)
    rand_mass_scale: tuple[float, float] = (1.0, 1.0)
    rand_gain_scale: tuple[float, float] = (1.0, 1.0)
    noise_vel_std: float = 0.0
    noise_pos_std: float = 0.0
    seed: int = 0

    def validate(self):
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        for name in ("command_range", "rand_friction", "rand_mass_scale",
                     "rand_gain_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not well-ordered")
        return self


class EnvError(ValueError):
    pass


class WalkerEnv:
    """B independent biped instances with shared model and reward preset."""

    def __init__(self, model: RobotModel, reward_cfg: rw.RewardConfig,
                 episode_cfg: EpisodeConfig | None = None,
                 library: GaitLibrary | None = None, num_envs: int = 1,
                 seed: int = 0):
        self.model = model
        self.cfg = rw.with_model_limits(reward_cfg.validate(), model)
        self.ep = (episode_cfg or EpisodeConfig()).validate()
        needs_library = reward_cfg.imitation_joints > 0 or reward_cfg.imitation_feet > 0
        if needs_library and library is None:
            raise EnvError(
                f"preset {reward_cfg.preset!r} has imitation weights but no gait "
                "library was provided")
        if library is not None and library.model_hash != model.model_hash:
            raise EnvError("gait library was built for a different model")
        self.library = library
        self.num = num_envs
        self.rng = np.random.default_rng(np.random.PCG64(seed))
        self.sim = PlanarSim(model, num=num_envs)
        nj = model.nj
        self.obs_dim = 8 + 3 * nj
        self.act_dim = nj
        self.divisors = observation_divisors(nj)
        self.term_names = rw.TERM_NAMES

        self.phase = np.zeros(num_envs)
        self.command = np.zeros(num_envs)
        self.prev_action = np.zeros((num_envs, nj))
        self.episode_t = np.zeros(num_envs)
        self.command_age = np.zeros(num_envs)
        self.episode_len = np.zeros(num_envs, dtype=int)
        # per-env sensor noise (enabled via randomization)
        self.noise_vel = np.full(num_envs, self.ep.noise_vel_std)
        self.noise_pos = np.full(num_envs, self.ep.noise_pos_std)
        self.randomization: dict[str, np.ndarray] = {}
        self.command_script = None  # optional fn(t (B,)) -> commands (B,)
        self._pending_impulse = np.zeros((num_envs, 3))  # [jx, jz, jtheta]

    # ------------------------------------------------------------- lifecycle

    def _spawn(self, rows: np.ndarray):
        n = int(rows.sum()) if rows.dtype == bool else len(rows)
        if n == 0:
            return
        m = self.model
        q = np.tile(m.standing_q(), (n, 1))
        q[:, m.nb:] += self.rng.uniform(-self.ep.reset_joint_noise,
                                        self.ep.reset_joint_noise, (n, m.nj))
        q[:, 1] -= m.total_mass * m.gravity / (m.contact_kn * 4)
        self.sim.set_state(q, np.zeros((n, m.nd)), t=0.0, rows=rows)
        if self.command_script is not None:
            self.command[rows] = self.command_script(np.zeros(n))
        else:
            self.command[rows] = self.rng.uniform(*self.ep.command_range, n)
        self.phase[rows] = self.rng.uniform(0.0, 1.0, n)
        self.prev_action[rows] = 0.0
        self.episode_t[rows] = 0.0
        self.command_age[rows] = 0.0
        self.episode_len[rows] = 0

    def reset_all(self) -> np.ndarray:
        self._spawn(np.ones(self.num, dtype=bool))
        return self.observe()

    def queue_impulse(self, rows, linear_x, linear_z=0.0, angular=0.0):
        """Torso impulse applied on the first inner step of the next control step."""
        self._pending_impulse[rows] = np.stack(
            np.broadcast_arrays(linear_x, linear_z, angular), axis=-1)

    # ------------------------------------------------------------------ step

    def t_gait_of(self, command: np.ndarray) -> np.ndarray:
        if self.library is not None and self.library.gaits:
            return self.library.query_batch(command, np.zeros_like(command))[2]
        return np.full(len(command), self.ep.default_t_gait)

    def step(self, action: np.ndarray):
        """One 50 Hz control step: returns (obs, reward, done, info)."""
        action = np.asarray(action, dtype=float)
        if action.shape != (self.num, self.act_dim):
            raise EnvError(f"action shape {action.shape} != {(self.num, self.act_dim)}")
        if not np.isfinite(action).all():
            raise EnvError("non-finite action")
        m, ep = self.model, self.ep
        targets = m.nominal_pose[None, :] + ep.action_scale * action

        self.sim.clear_touchdowns()
        gen = None
        if np.any(self._pending_impulse):
            gen = self.sim.torso_impulse_gen(self._pending_impulse[:, :2],
                                             self._pending_impulse[:, 2])
            self._pending_impulse[:] = 0.0
        tau_sq = np.zeros(self.num)
        for k in range(ep.decimation):
            tau = self.sim.step_batch(targets, m.kp_default, m.kd_default,
                                      gen_impulse=gen if k == 0 else None)
            tau_sq += (tau**2).sum(axis=1)
        tau_sq /= ep.decimation

        self.episode_t += ep.decimation * DT_INNER
        self.command_age += ep.decimation * DT_INNER
        self.episode_len += 1
        t_gait = self.t_gait_of(self.command)
        self.phase = (self.phase + ep.decimation * DT_INNER / t_gait) % 1.0

        kin = self.sim.kinematics()
        pitch = self.sim.q[:, 2]
        height = self.sim.q[:, 1]
        fell = ((np.abs(pitch) > self.cfg.fall_pitch)
                | (height < self.cfg.fall_height_frac * m.nominal_height)
                | self.sim.diverged)
        timeout = (self.episode_t >= self.cfg.t_max - 1e-9) & ~fell
        done = fell | timeout

        ref_q = ref_x = None
        if self.library is not None and self.library.gaits:
            ref_q, ref_x, _ = self.library.query_batch(self.command, self.phase)
        fn = np.stack([self.sim.contact_force[:, m.contact_foot == f, 1].sum(axis=1)
                       for f in range(len(m.foot_link))], axis=1)
        terms = rw.evaluate_batch(
            self.cfg,
            joint_pos=self.sim.q[:, m.nb:],
            joint_vel=self.sim.qd[:, m.nb:],
            base_vel=self.sim.qd[:, :2],
            pitch=pitch,
            yaw_rate=np.zeros(self.num),
            foot_rel_com=kin.foot_pos - kin.com_total[:, None, :],
            foot_normal_force=fn,
            touchdown_airtime=self.sim.touchdown_airtime,
            touchdown_count=self.sim.touchdown_count,
            tau=self.sim.tau,
            action=action,
            prev_action=self.prev_action,
            command_v=self.command,
            command_yaw=np.zeros(self.num),
            fell=fell,
            ref_joints=ref_q,
            ref_feet=ref_x,
        )
        reward = sum(terms.values())

        info = {
            "terms": terms,
            "time_outs": timeout,
            "fell": fell,
            "diverged": self.sim.diverged.copy(),
            "episode_len": self.episode_len.copy(),
            "base_vel": self.sim.qd[:, :2].copy(),
            "command": self.command.copy(),
            "mean_sq_torque": tau_sq,
            "energy_abs": self.sim.energy_abs.copy(),
            "energy_pos": self.sim.energy_pos.copy(),
            "com_x": kin.com_total[:, 0].copy(),
            "foot_normal_force": fn,
            "randomization": self.randomization,
        }

        self.prev_action = action.copy()
        # command resampling (training schedule)
        if self.command_script is not None:
            self.command = self.command_script(self.episode_t)
        else:
            stale = self.command_age >= ep.command_resample_s
            if stale.any():
                fresh = self.rng.uniform(*ep.command_range, self.num)
                self.command = np.where(stale, fresh, self.command)
                self.command_age = np.where(stale, 0.0, self.command_age)

        if done.any():
            self._spawn(done)
        return self.observe(), reward, done, info

    # ----------------------------------------------------------- observation

    def observe(self) -> np.ndarray:
        m = self.model
        q, qd = self.sim.q, self.sim.qd
        pitch = q[:, 2]
        qj = q[:, m.nb:].copy()
        qdj = qd[:, m.nb:].copy()
        base_vel = qd[:, :2].copy()
        pitch_rate = qd[:, 2].copy()
        if self.noise_vel.any() or self.noise_pos.any():
            qj += self.rng.normal(0.0, 1.0, qj.shape) * self.noise_pos[:, None]
            qdj += self.rng.normal(0.0, 1.0, qdj.shape) * self.noise_vel[:, None]
            base_vel += self.rng.normal(0.0, 1.0, base_vel.shape) * self.noise_vel[:, None]
            pitch_rate += self.rng.normal(0.0, 1.0, self.num) * self.noise_vel
        gravity = np.stack([-np.sin(pitch), -np.cos(pitch)], axis=1)
        obs = np.concatenate([
            self.phase[:, None],
            base_vel,
            pitch_rate[:, None],
            gravity,
            self.command[:, None],
            np.zeros((self.num, 1)),  # yaw-rate command placeholder
            qj,
            qdj,
            self.prev_action,
        ], axis=1)
        return obs / self.divisors[None, :]

    # -------------------------------------------------------- randomization

    def apply_randomization(self, seed: int | None = None, friction=None,
                            mass_scale=None, gain_scale=None,
                            noise_vel_std=None, noise_pos_std=None) -> dict:
        """Sample and install per-env physics perturbations; returns the record.

        Ranges default to the episode config; pass (lo, hi) tuples to
        override. Degenerate ranges reproduce the nominal environment exactly.
        """
        ep = self.ep
        rng = self.rng if seed is None else np.random.default_rng(np.random.PCG64(seed))
        friction = friction if friction is not None else ep.rand_friction
        mass_scale = mass_scale if mass_scale is not None else ep.rand_mass_scale
        gain_scale = gain_scale if gain_scale is not None else ep.rand_gain_scale
        self.sim.mu = rng.uniform(friction[0], friction[1], self.num)
        self.sim.mass_scale = rng.uniform(mass_scale[0], mass_scale[1], self.num)
        self.sim.gain_scale = rng.uniform(gain_scale[0], gain_scale[1], self.num)
        self.sim._kin = None  # mass scaling changes the mass matrix
        if noise_vel_std is not None:
            self.noise_vel[:] = noise_vel_std
        if noise_pos_std is not None:
            self.noise_pos[:] = noise_pos_std
        self.randomization = {
            "friction": self.sim.mu.copy(),
            "mass_scale": self.sim.mass_scale.copy(),
            "gain_scale": self.sim.gain_scale.copy(),
            "noise_vel_std": self.noise_vel.copy(),
            "noise_pos_std": self.noise_pos.copy(),
        }
        return self.randomization


class PointMassEnv:
    """1-D double-integrator velocity tracking; trainer smoke benchmark."""

    term_names = ["tracking", "action_cost"]

    def __init__(self, num_envs: int = 64, seed: int = 0, episode_len: int = 100):
        self.num = num_envs
        self.obs_dim = 3
        self.act_dim = 1
        self.rng = np.random.default_rng(np.random.PCG64(seed))
        self.episode_len = episode_len
        self.dt = 0.05
        self.v = np.zeros(num_envs)
        self.c = np.zeros(num_envs)
        self.steps = np.zeros(num_envs, dtype=int)

    def _spawn(self, rows):
        n = int(rows.sum())
        self.v[rows] = self.rng.uniform(-0.5, 0.5, n)
        self.c[rows] = self.rng.uniform(-1.0, 1.0, n)
        self.steps[rows] = 0

    def reset_all(self):
        self._spawn(np.ones(self.num, dtype=bool))
        return self.observe()

    def observe(self):
        return np.stack([self.v, self.c, self.v - self.c], axis=1)

    def step(self, action):
        a = np.clip(np.asarray(action)[:, 0], -2.0, 2.0)
        self.v = self.v + a * self.dt
        self.steps += 1
        tracking = np.exp(-np.abs(self.v - self.c) / 0.25)
        cost = -0.01 * a**2
        reward = tracking + cost
        done = self.steps >= self.episode_len
        info = {
            "terms": {"tracking": tracking, "action_cost": cost},
            "time_outs": done.copy(),
            "fell": np.zeros(self.num, dtype=bool),
            "episode_len": self.steps.copy(),
        }
        if done.any():
            self._spawn(done)
        return self.observe(), reward, done, info
