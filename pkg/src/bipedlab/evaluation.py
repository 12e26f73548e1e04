"""Gait benchmark suites: velocity step response, push-recovery Monte Carlo,
cost of transport, and a parameter-perturbation transfer check.

All suites drive the deterministic policy mean at 50 Hz and are bit
reproducible from (checkpoint, seed): per-trial draws come from
seed-sequence streams independent of batch layout or execution order.
Energy metering reads the same 1 kHz torque/velocity integrals accumulated
by the inner loop that produced the motion.
"""

from __future__ import annotations

import csv
import json
import os
import numpy as np

from . import nets
from .env import EpisodeConfig, WalkerEnv
from .gaitlib import GaitLibrary
from .model import RobotModel
from .rewards import RewardConfig

REPORT_SCHEMA_VERSION = 1

# comparison constants reported alongside every cost-of-transport result
HUMAN_CET = 0.2
HUMAN_CMT = 0.05

PUSH_REGIMES = ("linear", "angular", "combined")
# documented impulse grid: magnitudes drawn uniformly within these ranges
PUSH_LINEAR_RANGE = (2.0, 40.0)  # N*s, horizontal, random sign
PUSH_ANGULAR_RANGE = (1.0, 20.0)  # N*m*s about pitch, random sign
PUSH_SETTLE_S = 2.0  # walk-in-place time before the impulse
PUSH_RECOVER_S = 5.0  # classification happens this long after the impulse
RECOVERED_PITCH = 0.5  # rad
RECOVERED_HEIGHT_FRAC = 0.7  # of nominal base height


class EvalError(RuntimeError):
    pass


class CotFailure(EvalError):
    """Robot fell before completing the metering segments."""

    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


def _policy_actions(params, obs):
    mean, _, _ = nets.forward(params, obs)
    return mean


def make_eval_env(model: RobotModel, reward_cfg: RewardConfig,
                  library: GaitLibrary | None, num_envs: int, seed: int,
                  t_max: float = 120.0) -> WalkerEnv:
    """Evaluation env: long horizon, no reset noise, scripted commands."""
    ep = EpisodeConfig(t_max=t_max, reset_joint_noise=0.0)
    env = WalkerEnv(model, reward_cfg, ep, library=library,
                    num_envs=num_envs, seed=seed)
    return env


# ------------------------------------------------------------ velocity suite

def velocity_step_test(params, env: WalkerEnv, v_target: float = 1.0,
                       step_time: float = 2.0, duration: float = 10.0) -> dict:
    """Command step 0 -> v_target at step_time; 50 Hz CoM-velocity series.

    Reports rise time (first crossing of 90% of the target), steady-state
    mean and deviation amplitude over the final 3 s, and flags a tracking
    failure when the steady-state mean falls below 0.8 * target.
    """
    env.command_script = lambda t: np.where(t >= step_time, v_target, 0.0)
    env.reset_all()
    n = int(round(duration / 0.02))
    ts, vx, cmd = [], [], []
    fell_at = None
    for k in range(n):
        obs = env.observe()
        _, _, done, info = env.step(_policy_actions(params, obs))
        ts.append(round((k + 1) * 0.02, 10))
        vx.append(float(info["base_vel"][0, 0]))
        cmd.append(float(info["command"][0]))
        if done[0] and fell_at is None and info["fell"][0]:
            fell_at = float(env.sim.t[0])
            break
    env.command_script = None
    series = {"t": ts, "vx_command": cmd, "vx_measured": vx}
    out = {"series": series, "samples": len(ts), "fell_at": fell_at,
           "v_target": v_target, "step_time": step_time}
    arr_t, arr_v = np.array(ts), np.array(vx)
    after = arr_t > step_time
    rise = arr_t[after & (arr_v >= 0.9 * v_target)]
    out["rise_time"] = float(rise[0] - step_time) if rise.size else None
    tail = arr_t >= duration - 3.0
    if fell_at is None and tail.any():
        vss = arr_v[tail]
        out["steady_mean"] = float(vss.mean())
        out["deviation_amplitude"] = float(np.abs(vss - vss.mean()).max())
        out["tracking_failure"] = bool(out["steady_mean"] < 0.8 * v_target)
    else:
        out["steady_mean"] = None
        out["deviation_amplitude"] = None
        out["tracking_failure"] = True
    zero_seg = (arr_t > 1.0) & (arr_t <= step_time)
    out["zero_command_mean"] = float(arr_v[zero_seg].mean()) if zero_seg.any() else None
    return out


def tracking_error(params, env: WalkerEnv, v_command: float,
                   duration: float = 10.0, settle: float = 4.0) -> dict:
    """Steady-state velocity-tracking error at a constant command."""
    env.command_script = lambda t: np.full_like(t, v_command, dtype=float)
    env.reset_all()
    n = int(round(duration / 0.02))
    vs = []
    fell = False
    for k in range(n):
        obs = env.observe()
        _, _, done, info = env.step(_policy_actions(params, obs))
        if (k + 1) * 0.02 > settle:
            vs.append(float(info["base_vel"][0, 0]))
        if done[0] and info["fell"][0]:
            fell = True
            break
    env.command_script = None
    mean_v = float(np.mean(vs)) if vs else 0.0
    return {"command": v_command, "mean_velocity": mean_v,
            "error": abs(mean_v - v_command), "fell": fell}


# ---------------------------------------------------------------- push suite

def draw_push_trials(regime: str, samples: int, seed: int) -> dict:
    """Per-trial impulse magnitudes/signs/phases from order-independent streams."""
    if regime not in PUSH_REGIMES:
        raise EvalError(f"unknown push regime {regime!r}; valid: {PUSH_REGIMES}")
    lin = np.zeros(samples)
    ang = np.zeros(samples)
    phase = np.zeros(samples)
    for i in range(samples):
        r = np.random.default_rng(np.random.SeedSequence((seed, i)))
        u = r.uniform(0.0, 1.0, 5)
        if regime in ("linear", "combined"):
            lin[i] = (PUSH_LINEAR_RANGE[0]
                      + u[0] * (PUSH_LINEAR_RANGE[1] - PUSH_LINEAR_RANGE[0]))
            lin[i] *= 1.0 if u[1] < 0.5 else -1.0
        if regime in ("angular", "combined"):
            ang[i] = (PUSH_ANGULAR_RANGE[0]
                      + u[2] * (PUSH_ANGULAR_RANGE[1] - PUSH_ANGULAR_RANGE[0]))
            ang[i] *= 1.0 if u[3] < 0.5 else -1.0
        phase[i] = u[4]
    return {"linear": lin, "angular": ang, "phase": phase}


def push_recovery(params, env: WalkerEnv, regime: str, samples: int = 300,
                  seed: int = 0, magnitude_scale: float = 1.0) -> dict:
    """Monte-Carlo push-recovery rate at zero command velocity.

    Each trial walks in place for the settle time, receives a torso impulse
    at its drawn phase, and is classified as recovered iff the robot is
    upright PUSH_RECOVER_S seconds after the impulse. ``magnitude_scale``
    supports common-random-number magnitude sweeps.
    """
    if env.num != samples:
        raise EvalError(f"env must have num_envs == samples ({samples})")
    trials = draw_push_trials(regime, samples, seed)
    env.command_script = lambda t: np.zeros_like(t)
    env.reset_all()
    # align every instance's clock so the drawn phase is applied consistently
    env.phase[:] = 0.0

    settle_steps = int(round(PUSH_SETTLE_S / 0.02))
    recover_steps = int(round(PUSH_RECOVER_S / 0.02))
    t_gait = env.t_gait_of(np.zeros(samples))
    # impulse lands at the control step where the clock passes the drawn phase
    push_step = settle_steps + np.round(trials["phase"] * t_gait / 0.02).astype(int)
    max_push = int(push_step.max())

    fell = np.zeros(samples, dtype=bool)
    time_to_fall = np.full(samples, np.nan)
    pushed = np.zeros(samples, dtype=bool)
    steps_after = np.zeros(samples, dtype=int)
    outcome_known = np.zeros(samples, dtype=bool)
    recovered = np.zeros(samples, dtype=bool)

    k = 0
    while not outcome_known.all():
        fire = (~pushed) & (k == push_step)
        if fire.any():
            env.queue_impulse(fire,
                              linear_x=trials["linear"][fire] * magnitude_scale,
                              angular=trials["angular"][fire] * magnitude_scale)
            pushed |= fire
        obs = env.observe()
        _, _, done, info = env.step(_policy_actions(params, obs))
        newly_fell = info["fell"] & ~fell & ~outcome_known
        if newly_fell.any():
            fell |= newly_fell
            time_to_fall[newly_fell] = (k + 1) * 0.02 - (push_step[newly_fell] * 0.02)
            outcome_known |= newly_fell & pushed
            # falls before the push mark the trial failed as well
            outcome_known |= newly_fell & ~pushed
        steps_after[pushed] += 1
        settled = pushed & (steps_after >= recover_steps) & ~outcome_known
        if settled.any():
            pitch_ok = np.abs(env.sim.q[:, 2]) < RECOVERED_PITCH
            height_ok = env.sim.q[:, 1] > RECOVERED_HEIGHT_FRAC * env.model.nominal_height
            recovered |= settled & pitch_ok & height_ok
            outcome_known |= settled
        k += 1
        if k > max_push + recover_steps + settle_steps + 500:
            break
    env.command_script = None

    rate = float(recovered.sum()) / samples
    trial_list = [
        {"regime": regime,
         "linear_impulse": float(trials["linear"][i] * magnitude_scale),
         "angular_impulse": float(trials["angular"][i] * magnitude_scale),
         "phase": float(trials["phase"][i]),
         "outcome": "recovered" if recovered[i] else "fell",
         "time_to_fall": None if np.isnan(time_to_fall[i]) else float(time_to_fall[i])}
        for i in range(samples)
    ]
    return {"regime": regime, "samples": samples, "seed": seed,
            "magnitude_scale": magnitude_scale, "recovery_rate": rate,
            "trials": trial_list,
            "grid": {"linear_range": PUSH_LINEAR_RANGE,
                     "angular_range": PUSH_ANGULAR_RANGE}}


def push_magnitude_sweep(params, model, reward_cfg, library, seed: int,
                         scales=(0.5, 1.0, 1.5, 2.0), samples: int = 300,
                         regime: str = "combined") -> list[dict]:
    """Recovery rate vs impulse scale with common random numbers."""
    out = []
    for s in scales:
        env = make_eval_env(model, reward_cfg, library, samples, seed=1234)
        r = push_recovery(params, env, regime, samples=samples, seed=seed,
                          magnitude_scale=s)
        out.append({"scale": s, "recovery_rate": r["recovery_rate"]})
    return out


# ----------------------------------------------------------------- cot suite

def cost_of_transport(params, env: WalkerEnv, v_command: float = 0.5,
                      segments: int = 5, settle: float = 4.0) -> dict:
    """Energetic and mechanical cost of transport over 1 m segments.

    Integrates sum |tau_i * w_i| (and its positive part) from the inner-loop
    meters over the time to travel each 1 m segment, divides by m*g*D, and
    averages over >= `segments` segments after steady walking is reached.
    """
    env.command_script = lambda t: np.full_like(t, v_command, dtype=float)
    env.reset_all()
    m = env.model
    mass = m.total_mass * float(env.sim.mass_scale[0])
    seg_data = []
    x0 = e0 = ep0 = None
    next_boundary = None
    max_steps = int(120.0 / 0.02)
    for k in range(max_steps):
        obs = env.observe()
        _, _, done, info = env.step(_policy_actions(params, obs))
        t = (k + 1) * 0.02
        if done[0] and info["fell"][0]:
            env.command_script = None
            raise CotFailure(
                f"fell at t={t:.2f}s after {len(seg_data)} segments",
                {"segments": seg_data, "fell_at": t})
        if t < settle:
            continue
        x = float(info["com_x"][0])
        if x0 is None:
            x0, e0, ep0 = x, float(info["energy_abs"][0]), float(info["energy_pos"][0])
            next_boundary = x0 + 1.0
            continue
        if x >= next_boundary:
            e1, ep1 = float(info["energy_abs"][0]), float(info["energy_pos"][0])
            seg_data.append({
                "distance": 1.0,
                "cet": (e1 - e0) / (mass * m.gravity * 1.0),
                "cmt": (ep1 - ep0) / (mass * m.gravity * 1.0),
            })
            e0, ep0 = e1, ep1
            next_boundary += 1.0
            if len(seg_data) >= segments:
                break
    env.command_script = None
    if len(seg_data) < segments:
        raise CotFailure(
            f"only {len(seg_data)}/{segments} segments completed",
            {"segments": seg_data})
    cet = float(np.mean([s["cet"] for s in seg_data]))
    cmt = float(np.mean([s["cmt"] for s in seg_data]))
    return {"v_command": v_command, "cet": cet, "cmt": cmt,
            "segments": seg_data, "human_cet": HUMAN_CET, "human_cmt": HUMAN_CMT}


# ------------------------------------------------------------- transfer suite

def transfer_check(params, model, reward_cfg, library, grid: list[dict],
                   seed: int = 0, push_samples: int = 60) -> list[dict]:
    """Re-run the velocity and push suites under perturbed physics.

    Each grid entry may set friction, mass_scale, gain_scale, noise_vel_std,
    noise_pos_std (scalars applied as degenerate ranges). The in-engine
    parameter perturbation replaces a second-simulator transfer; reports are
    labeled accordingly. Failures (falls, tracking loss) are recorded rows,
    never exceptions.
    """
    if not grid:
        raise EvalError("perturbation grid is empty")
    rows = []
    for entry in grid:
        def to_range(v):
            return (v, v) if v is not None else None
        env = make_eval_env(model, reward_cfg, library, 1, seed=500)
        env.apply_randomization(
            seed=seed,
            friction=to_range(entry.get("friction")),
            mass_scale=to_range(entry.get("mass_scale")),
            gain_scale=to_range(entry.get("gain_scale")),
            noise_vel_std=entry.get("noise_vel_std"),
            noise_pos_std=entry.get("noise_pos_std"),
        )
        vel = velocity_step_test(params, env, v_target=0.5)
        try:
            cot_env = make_eval_env(model, reward_cfg, library, 1, seed=501)
            cot_env.apply_randomization(
                seed=seed, friction=to_range(entry.get("friction")),
                mass_scale=to_range(entry.get("mass_scale")),
                gain_scale=to_range(entry.get("gain_scale")),
                noise_vel_std=entry.get("noise_vel_std"),
                noise_pos_std=entry.get("noise_pos_std"))
            cot = cost_of_transport(params, cot_env)
            cot_row = {"cet": cot["cet"], "cmt": cot["cmt"], "failed": False}
        except CotFailure as e:
            cot_row = {"cet": None, "cmt": None, "failed": True,
                       "detail": str(e)}
        penv = make_eval_env(model, reward_cfg, library, push_samples, seed=502)
        penv.apply_randomization(
            seed=seed, friction=to_range(entry.get("friction")),
            mass_scale=to_range(entry.get("mass_scale")),
            gain_scale=to_range(entry.get("gain_scale")),
            noise_vel_std=entry.get("noise_vel_std"),
            noise_pos_std=entry.get("noise_pos_std"))
        push = push_recovery(params, penv, "combined", samples=push_samples,
                             seed=seed)
        rows.append({
            "perturbation": entry,
            "velocity": {k: vel[k] for k in
                         ("rise_time", "steady_mean", "deviation_amplitude",
                          "tracking_failure", "fell_at")},
            "cot": cot_row,
            "push_recovery_rate": push["recovery_rate"],
        })
    return rows


# -------------------------------------------------------------------- report

def build_report(*, seed: int, checkpoint_hash: str = "", config_hash: str = "",
                 suites: dict, preset: str = "", notes: list[str] | None = None) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": seed,
        "preset": preset,
        "checkpoint_hash": checkpoint_hash,
        "config_hash": config_hash,
        "human_reference": {"cet": HUMAN_CET, "cmt": HUMAN_CMT},
        "notes": (notes or []) + [
            "second-simulator transfer replaced by in-engine parameter "
            "perturbation (transfer suite)"],
        "suites": suites,
    }


def write_report(report: dict, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(report, fh, indent=1)
    os.replace(tmp, path)


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def render_plots_data(report: dict, out_dir) -> list[str]:
    """Emit per-figure CSV files; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    suites = report.get("suites", {})
    if "velocity" in suites and suites["velocity"].get("series"):
        p = os.path.join(out_dir, "velocity_series.csv")
        s = suites["velocity"]["series"]
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "vx_command", "vx_measured"])
            for row in zip(s["t"], s["vx_command"], s["vx_measured"]):
                w.writerow(row)
        written.append(p)
    if "push" in suites:
        p = os.path.join(out_dir, "recovery_rates.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["preset", "regime", "recovery_rate", "samples"])
            for preset_name, regimes in suites["push"].items():
                for regime, data in regimes.items():
                    w.writerow([preset_name, regime, data["recovery_rate"],
                                data["samples"]])
        written.append(p)
    if "training_log" in report and report["training_log"]:
        p = os.path.join(out_dir, "reward_means.csv")
        rows = report["training_log"]
        term_cols = [c for c in rows[0] if c.startswith("term_")]
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "term", "mean"])
            for r in rows:
                for c in term_cols:
                    w.writerow([r["iteration"], c[len("term_"):], r[c]])
        written.append(p)
    return written
