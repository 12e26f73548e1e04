"""Per-control-step reward terms and the three named training presets.

All terms are pure functions evaluated once per 50 Hz control step. The three
presets correspond to the training regimes: gait1 uses only the imitation
terms, gait2 balances imitation against command tracking and behaviour
penalties (joint imitation only; the foot term is dropped for robustness),
and gait3 trains without imitation entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

TERM_NAMES = [
    "imitation_joints",
    "imitation_feet",
    "tracking_lin_vel",
    "tracking_ang_vel",
    "no_fly",
    "feet_air_time",
    "action_rate",
    "motor_vel_limit",
    "termination",
    "motor_pos_limit",
    "orientation",
    "lin_vel_z",
    "torques",
]

PENALTY_TERMS = ["action_rate", "motor_vel_limit", "termination",
                 "motor_pos_limit", "orientation", "lin_vel_z", "torques"]


class RewardConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    preset: str = "custom"
    # term weights (Table-II style columns)
    imitation_joints: float = 0.0
    imitation_feet: float = 0.0
    tracking_lin_vel: float = 0.0
    tracking_ang_vel: float = 0.0
    no_fly: float = 0.0
    feet_air_time: float = 0.0
    action_rate: float = 0.0
    motor_vel_limit: float = 0.0
    termination: float = 0.0
    motor_pos_limit: float = 0.0
    orientation: float = 0.0
    lin_vel_z: float = 0.0
    torques: float = 0.0
    # scales
    tracking_sigma: float = 0.25
    joint_sharpness: float = 0.2  # imitation denominator, rad^2
    feet_sharpness: float = 0.1  # imitation denominator, m
    no_fly_force: float = 0.1  # N, contact considered loaded above this
    air_time_target: float = 0.3  # s, threshold for the touchdown credit
    t_max: float = 20.0  # episode cap, s
    # fall detection
    fall_pitch: float = 0.8  # rad
    fall_height_frac: float = 0.6  # of nominal base height
    # model-derived limits, attached via with_model_limits()
    vel_limits: np.ndarray | None = field(default=None, repr=False)
    pos_lo: np.ndarray | None = field(default=None, repr=False)
    pos_hi: np.ndarray | None = field(default=None, repr=False)
    nominal_height: float = 0.86

    def weight(self, term: str) -> float:
        return getattr(self, term)

    def validate(self):
        for t in PENALTY_TERMS:
            if self.weight(t) > 0:
                raise RewardConfigError(f"penalty weight '{t}' must be <= 0")
        for t in ("imitation_joints", "imitation_feet", "tracking_lin_vel",
                  "tracking_ang_vel", "no_fly", "feet_air_time"):
            if self.weight(t) < 0:
                raise RewardConfigError(f"reward weight '{t}' must be >= 0")
        if self.t_max <= 0:
            raise RewardConfigError("t_max must be positive")
        return self


_GAIT2 = dict(
    imitation_joints=5.0,
    imitation_feet=0.0,  # joint imitation only, for push robustness
    tracking_lin_vel=1.5,
    tracking_ang_vel=1.5,
    no_fly=0.1,
    feet_air_time=3.0,
    action_rate=-3e-3,
    motor_vel_limit=-0.01,
    termination=-30.0,
    motor_pos_limit=-0.95,
    orientation=-1.0,
    lin_vel_z=-1.5,
    torques=-8e-6,
)

_PRESETS = {
    "gait1": dict(imitation_joints=5.0, imitation_feet=5.0),
    "gait2": _GAIT2,
    "gait3": {**_GAIT2, "imitation_joints": 0.0, "tracking_lin_vel": 0.4,
              "tracking_ang_vel": 0.3, "no_fly": 0.4, "action_rate": -5e-4},
}


def preset(name: str) -> RewardConfig:
    if name not in _PRESETS:
        raise RewardConfigError(
            f"unknown preset {name!r}; valid presets: {sorted(_PRESETS)}")
    return RewardConfig(preset=name, **_PRESETS[name]).validate()


def with_model_limits(cfg: RewardConfig, model) -> RewardConfig:
    return replace(cfg, vel_limits=model.vel_limit, pos_lo=model.pos_lo,
                   pos_hi=model.pos_hi, nominal_height=model.nominal_height)


# ----------------------------------------------------------------- terms

def imitation_joints(q: np.ndarray, q_ref: np.ndarray, w: float,
                     sharpness: float = 0.2) -> np.ndarray | float:
    """w * exp(-sum ||q_i - q*_i||^2 / sharpness), summed over motors."""
    q, q_ref = np.asarray(q), np.asarray(q_ref)
    if q.shape != q_ref.shape:
        raise ValueError(f"joint vector shapes differ: {q.shape} vs {q_ref.shape}")
    err = ((q - q_ref) ** 2).sum(axis=-1)
    return w * np.exp(-err / sharpness)


def imitation_feet(x: np.ndarray, x_ref: np.ndarray, w: float,
                   sharpness: float = 0.1) -> np.ndarray | float:
    """w * exp(-sum |x_i - x*_i| / sharpness), L1 over both feet's components."""
    x, x_ref = np.asarray(x), np.asarray(x_ref)
    if x.shape != x_ref.shape:
        raise ValueError(f"foot position shapes differ: {x.shape} vs {x_ref.shape}")
    err = np.abs(x - x_ref).sum(axis=(-2, -1))
    return w * np.exp(-err / sharpness)


def tracking_exp(target, value, w: float, sigma: float):
    """w * exp(-||target - value|| / sigma); the norm is not squared."""
    return w * np.exp(-np.abs(np.asarray(target) - np.asarray(value)) / sigma)


def evaluate_batch(cfg: RewardConfig, *, joint_pos, joint_vel, base_vel, pitch,
                   yaw_rate, foot_rel_com, foot_normal_force, touchdown_airtime,
                   touchdown_count, tau, action, prev_action, command_v,
                   command_yaw, fell, ref_joints=None, ref_feet=None) -> dict:
    """All Table-II terms for a batch of control steps; returns {term: (B,)}.

    Pure function of its arguments. ``fell`` marks episodes that terminated by
    falling at this step (the one-shot termination penalty).
    """
    B = np.asarray(joint_pos).shape[0]
    zeros = np.zeros(B)
    terms = {}

    if cfg.imitation_joints != 0.0:
        if ref_joints is None:
            raise ValueError("imitation_joints weight set but no reference provided")
        terms["imitation_joints"] = imitation_joints(
            joint_pos, ref_joints, cfg.imitation_joints, cfg.joint_sharpness)
    else:
        terms["imitation_joints"] = zeros

    if cfg.imitation_feet != 0.0:
        if ref_feet is None:
            raise ValueError("imitation_feet weight set but no reference provided")
        terms["imitation_feet"] = imitation_feet(
            foot_rel_com, ref_feet, cfg.imitation_feet, cfg.feet_sharpness)
    else:
        terms["imitation_feet"] = zeros

    terms["tracking_lin_vel"] = tracking_exp(
        command_v, base_vel[:, 0], cfg.tracking_lin_vel, cfg.tracking_sigma)
    terms["tracking_ang_vel"] = tracking_exp(
        command_yaw, yaw_rate, cfg.tracking_ang_vel, cfg.tracking_sigma)

    loaded = foot_normal_force > cfg.no_fly_force  # (B, nf)
    terms["no_fly"] = cfg.no_fly * (loaded.sum(axis=1) == 1).astype(float)

    credit = touchdown_airtime - cfg.air_time_target * touchdown_count
    terms["feet_air_time"] = cfg.feet_air_time * credit.sum(axis=1)

    da = np.asarray(action) - np.asarray(prev_action)
    terms["action_rate"] = cfg.action_rate * (da**2).sum(axis=1)

    excess_v = np.maximum(np.abs(joint_vel) - cfg.vel_limits[None, :], 0.0)
    terms["motor_vel_limit"] = cfg.motor_vel_limit * excess_v.sum(axis=1)

    terms["termination"] = cfg.termination * np.asarray(fell, dtype=float)

    excess_p = (np.maximum(joint_pos - cfg.pos_hi[None, :], 0.0)
                + np.maximum(cfg.pos_lo[None, :] - joint_pos, 0.0))
    terms["motor_pos_limit"] = cfg.motor_pos_limit * excess_p.sum(axis=1)

    # gravity direction in the torso frame is (-sin(pitch), -cos(pitch))
    terms["orientation"] = cfg.orientation * np.sin(pitch) ** 2

    terms["lin_vel_z"] = cfg.lin_vel_z * base_vel[:, 1] ** 2

    terms["torques"] = cfg.torques * (np.asarray(tau) ** 2).sum(axis=1)

    return terms


@dataclass
class RewardBreakdown:
    """Per-term values of one control step and their sum."""

    terms: dict
    total: float

    @classmethod
    def from_terms(cls, terms: dict) -> "RewardBreakdown":
        return cls(terms=terms, total=float(sum(terms.values())))


def evaluate(state, prev_action, action, command, ref, cfg: RewardConfig,
             fell: bool = False) -> RewardBreakdown:
    """Single-instance reward evaluation (thin wrapper over the batch form).

    ``state`` is a SimState carrying foot positions relative to the CoM;
    ``command`` is (target forward velocity, target yaw rate); ``ref`` is a
    gait-library query result (q*, x*, T) or None when imitation is off.
    """
    nb = len(state.q) - len(state.tau)
    ref_q = ref_feet = None
    if ref is not None:
        ref_q = np.asarray(ref[0])[None, :]
        ref_feet = np.asarray(ref[1])[None, :, :]
    fn = state.foot_normal_force
    terms = evaluate_batch(
        cfg,
        joint_pos=state.q[None, nb:],
        joint_vel=state.qd[None, nb:],
        base_vel=state.qd[None, :2] if nb else np.zeros((1, 2)),
        pitch=state.q[None, 2] if nb else np.zeros(1),
        yaw_rate=np.zeros(1),
        foot_rel_com=state.foot_rel_com[None, :, :],
        foot_normal_force=fn[None, :],
        touchdown_airtime=state.touchdown_airtime[None, :],
        touchdown_count=state.touchdown_count[None, :],
        tau=state.tau[None, :],
        action=np.asarray(action)[None, :],
        prev_action=np.asarray(prev_action)[None, :],
        command_v=np.asarray([command[0]]),
        command_yaw=np.asarray([command[1]]),
        fell=np.asarray([fell]),
        ref_joints=ref_q,
        ref_feet=ref_feet,
    )
    return RewardBreakdown.from_terms({k: float(v[0]) for k, v in terms.items()})


class EpisodeMeanTracker:
    """Running per-episode means of each term (training-log diagnostics)."""

    def __init__(self):
        self.sums = {t: 0.0 for t in TERM_NAMES}
        self.count = 0

    def add(self, breakdown: RewardBreakdown):
        for t, v in breakdown.terms.items():
            self.sums[t] += v
        self.count += 1

    def means(self) -> dict:
        if self.count == 0:
            return {t: 0.0 for t in TERM_NAMES}
        return {t: s / self.count for t, s in self.sums.items()}
