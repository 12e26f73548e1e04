"""Gait library: periodic Bezier reference trajectories and their offline search.

A gait is one half-stride (a single step) of degree-5 Bezier curves per joint
over phase [0, 0.5); the second half is the left/right mirror. Periodicity and
C1 continuity across the half-stride boundary are enforced by construction on
the last two control points, so stored gaits are exactly periodic.

Gait search is single-stride shooting: candidate trajectories are tracked by a
stiff PD controller in the dynamics engine for one full cycle and scored by
mechanical work per distance plus penalties for speed error, falling,
dynamic non-periodicity, and insufficient swing-foot clearance. The search
runs a rank-mu evolution strategy over the Bezier control points and the
stride period.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .es import RankMuES
from .model import RobotModel
from .sim import DT_INNER, PlanarSim

LIBRARY_SCHEMA_VERSION = 1

# command-velocity grid of the full library, m/s
DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(11))

DEGREE = 5  # Bezier degree per joint over one step

_BINOM5 = np.array([math.comb(5, k) for k in range(6)], dtype=float)
_BINOM4 = np.array([math.comb(4, k) for k in range(5)], dtype=float)


class GaitLibraryError(RuntimeError):
    pass


class InfeasibleGaitError(GaitLibraryError):
    """No candidate satisfied the fall/periodicity feasibility constraints."""

    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


def _bernstein(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape + (6,))
    for k in range(6):
        out[..., k] = _BINOM5[k] * s**k * (1.0 - s) ** (5 - k)
    return out


def _bernstein_d(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape + (5,))
    for k in range(5):
        out[..., k] = _BINOM4[k] * s**k * (1.0 - s) ** (4 - k)
    return out


def project_coeffs(raw: np.ndarray, perm: np.ndarray,
                   lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Clamp control points into joint limits and enforce periodicity.

    The curve of joint j on the second half-stride is the curve of perm[j] on
    the first, so position continuity/periodicity requires c5[j] = c0[perm[j]]
    and C1 continuity c4[j] = c5[j] - (c1[perm[j]] - c0[perm[j]]). Control
    points are clamped first; since mirrored joints share limits the derived
    c5 stays within them (c4 is re-clamped, giving up C1 at the limit edge).
    """
    c = np.clip(raw, lo[:, None], hi[:, None])
    c[:, 5] = c[perm, 0]
    c[:, 4] = np.clip(c[:, 5] - (c[perm, 1] - c[perm, 0]), lo, hi)
    return c


@dataclass
class ReferenceGait:
    """One command-velocity entry of the gait library."""

    v_star: float
    t_gait: float  # full stride period (two mirrored steps), s
    coeffs: np.ndarray  # (nj, 6) Bezier control points for phase in [0, 0.5)
    mirror_perm: np.ndarray  # (nj,) left/right joint swap
    foot_samples: np.ndarray  # (S+1, nf, 2) foot centers relative to CoM over phase

    def joints(self, phase) -> np.ndarray:
        """Reference joint vector(s) at phase in [0, 1) (arrays broadcast)."""
        ph = np.asarray(phase, dtype=float) % 1.0
        second = ph >= 0.5
        s = np.where(second, 2.0 * ph - 1.0, 2.0 * ph)
        vals = _bernstein(s) @ self.coeffs.T  # (..., nj)
        mirrored = vals[..., self.mirror_perm]
        return np.where(second[..., None], mirrored, vals) if vals.ndim > 1 else \
            (mirrored if second else vals)

    def joint_velocity(self, phase) -> np.ndarray:
        """d(reference)/dt at phase in [0, 1)."""
        ph = np.asarray(phase, dtype=float) % 1.0
        second = ph >= 0.5
        s = np.where(second, 2.0 * ph - 1.0, 2.0 * ph)
        diff = 5.0 * (self.coeffs[:, 1:] - self.coeffs[:, :-1])  # (nj, 5)
        dvals = _bernstein_d(s) @ diff.T  # d/ds
        dvals = dvals * (2.0 / self.t_gait)  # ds/dphase = 2, dphase/dt = 1/T
        mirrored = dvals[..., self.mirror_perm]
        return np.where(second[..., None], mirrored, dvals) if dvals.ndim > 1 else \
            (mirrored if second else dvals)

    def feet(self, phase) -> np.ndarray:
        """Foot centers relative to the CoM, linearly interpolated. (..., nf, 2)."""
        ph = np.asarray(phase, dtype=float) % 1.0
        S = self.foot_samples.shape[0] - 1
        x = ph * S
        i0 = np.minimum(x.astype(int), S - 1)
        frac = x - i0
        a = self.foot_samples[i0]
        b = self.foot_samples[i0 + 1]
        return a + frac[..., None, None] * (b - a)


def make_gait(model: RobotModel, v_star: float, t_gait: float,
              raw_coeffs: np.ndarray, n_samples: int = 240) -> ReferenceGait:
    """Build a validated gait from raw control points (projection applied)."""
    coeffs = project_coeffs(np.asarray(raw_coeffs, dtype=float).copy(),
                            model.mirror_perm, model.pos_lo, model.pos_hi)
    gait = ReferenceGait(v_star=float(v_star), t_gait=float(t_gait), coeffs=coeffs,
                         mirror_perm=model.mirror_perm.copy(),
                         foot_samples=np.zeros((n_samples + 1, len(model.foot_link), 2)))
    phases = np.linspace(0.0, 1.0, n_samples + 1)
    sim = PlanarSim(model, num=n_samples + 1, contact_enabled=False)
    q = np.zeros((n_samples + 1, model.nd))
    if model.floating_base:
        q[:, 1] = model.nominal_height
    q[:, model.nb:] = gait.joints(phases)
    sim.q = q
    kin = sim.kinematics(q)
    gait.foot_samples = kin.foot_pos - kin.com_total[:, None, :]
    return gait


# ------------------------------------------------------------------ rollouts

def eval_bezier_batch(coeffs: np.ndarray, perm: np.ndarray, phases: np.ndarray):
    """Evaluate B different gaits at per-candidate phases. (B, nj)."""
    ph = phases % 1.0
    second = ph >= 0.5
    s = np.where(second, 2.0 * ph - 1.0, 2.0 * ph)
    vals = np.einsum("bk,bjk->bj", _bernstein(s), coeffs)
    vals[second] = vals[second][:, perm]
    return vals


def rollout_gait_batch(model: RobotModel, coeffs: np.ndarray, t_gait: np.ndarray,
                       v_star: np.ndarray, kp: float = 400.0, kd: float = 12.0,
                       fall_pitch: float = 0.8, fall_height: float = 0.55,
                       n_cycles: int = 2) -> dict:
    """Shoot each candidate under stiff PD tracking and score the last cycle.

    The first n_cycles-1 cycles are warmup: the prescribed start state (level
    torso, base velocity v*) is not on the periodic orbit, so the trajectory
    is allowed to settle onto its attractor before the scored cycle. Returns
    per-candidate metrics: mean speed, fall flag, dynamic periodicity residual
    across the scored cycle, per-foot swing clearance, mechanical work, and
    travel distance.
    """
    B = coeffs.shape[0]
    perm = model.mirror_perm
    sim = PlanarSim(model, num=B)
    steps = np.maximum(np.round(t_gait / DT_INNER).astype(int), 50)
    total_steps = n_cycles * steps
    max_steps = int(total_steps.max())
    score_start = (n_cycles - 1) * steps

    # initial state: reference pose at phase 0, stance sole lightly loaded
    q0 = np.zeros((B, model.nd))
    q0[:, model.nb:] = eval_bezier_batch(coeffs, perm, np.zeros(B))
    sim.q = q0
    kin0 = sim.kinematics(q0)
    pen0 = model.total_mass * model.gravity / (2 * model.contact_kn)
    q0[:, 1] = pen0 - kin0.contact_pos[:, :, 1].min(axis=1)
    qd0 = np.zeros((B, model.nd))
    qd0[:, 0] = v_star
    diff = 5.0 * (coeffs[:, :, 1:] - coeffs[:, :, :-1])
    qd0[:, model.nb:] = np.einsum("k,bjk->bj", _bernstein_d(np.zeros(1))[0],
                                  diff) * (2.0 / t_gait[:, None])
    sim.set_state(q0, qd0)

    fallen = np.zeros(B, dtype=bool)
    resid_q = np.zeros(B)
    resid_qd = np.zeros(B)
    com_start = np.zeros(B)
    com_end = np.zeros(B)
    energy0 = np.zeros(B)
    energy1 = np.zeros(B)
    q_ref = np.zeros((B, model.nd))
    qd_ref = np.zeros((B, model.nd))
    nf = len(model.foot_link)
    clearance = np.full((B, nf), -np.inf)
    swing_seen = np.zeros((B, nf), dtype=bool)

    for k in range(max_steps):
        starts = k == score_start
        if starts.any():
            kin = sim.kinematics()
            com_start[starts] = kin.com_total[starts, 0]
            energy0[starts] = sim.energy_abs[starts]
            q_ref[starts] = sim.q[starts]
            qd_ref[starts] = sim.qd[starts]
        phase = (k * DT_INNER) / t_gait
        targets = eval_bezier_batch(coeffs, perm, phase)
        sim.step_batch(targets, kp, kd)
        active = k < total_steps
        kin = sim.kinematics()
        fallen |= active & ((np.abs(sim.q[:, 2]) > fall_pitch)
                            | (sim.q[:, 1] < fall_height * model.nominal_height)
                            | sim.diverged)
        scoring = active & (k >= score_start)
        if scoring.any():
            # swing window: right foot (index 1) swings in phase [0, 0.5)
            sole = np.stack([kin.contact_pos[:, model.contact_foot == f, 1].min(axis=1)
                             for f in range(nf)], axis=1)
            ph = phase % 1.0
            swinging = np.stack([(ph >= 0.5), (ph < 0.5)], axis=1) & scoring[:, None]
            clearance = np.where(swinging, np.maximum(clearance, sole), clearance)
            swing_seen |= swinging
        ends = active & (k == total_steps - 1)
        if ends.any():
            resid_q[ends] = np.abs(sim.q[ends, 1:] - q_ref[ends, 1:]).max(axis=1)
            resid_qd[ends] = np.abs(sim.qd[ends] - qd_ref[ends]).max(axis=1)
            com_end[ends] = kin.com_total[ends, 0]
            energy1[ends] = sim.energy_abs[ends]

    clearance[~swing_seen] = 0.0
    dist = com_end - com_start
    t_total = steps * DT_INNER
    return {
        "mean_speed": dist / t_total,
        "fallen": fallen,
        "resid_q": resid_q,
        "resid_qd": resid_qd,
        "clearance": clearance,
        "work": energy1 - energy0,
        "distance": dist,
    }


OBJ_FALL_PENALTY = 200.0


def gait_objective(metrics: dict, v_star: np.ndarray, model: RobotModel,
                   min_clearance: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """(objective, feasible) per candidate.

    Objective: mechanical work per distance (cost-of-transport integrand) plus
    penalties for mean-speed error, falling, dynamic non-periodicity of the
    mirrored state, and swing-foot clearance below 2 cm.
    """
    mgd = model.total_mass * model.gravity * np.maximum(np.abs(metrics["distance"]), 0.05)
    cot = metrics["work"] / mgd
    speed_err = np.abs(metrics["mean_speed"] - v_star)
    resid = metrics["resid_q"] + 0.2 * metrics["resid_qd"]
    clear_short = np.maximum(0.0, (min_clearance - metrics["clearance"]) / min_clearance)
    obj = (cot
           + 30.0 * speed_err
           + OBJ_FALL_PENALTY * metrics["fallen"]
           + 8.0 * resid
           + 3.0 * clear_short.sum(axis=1))
    feasible = (~metrics["fallen"]) & (resid < 0.35)
    return obj, feasible


def initial_candidate(model: RobotModel, v_star: float, t_gait: float) -> np.ndarray:
    """Standing pose plus a sinusoidal hip/knee swing scaled with v_star."""
    nj = model.nj
    coeffs = np.tile(model.nominal_pose[:, None], (1, 6))
    amp = min(0.81 * v_star * t_gait, 0.55)
    knee_amp = 0.2 + 0.5 * v_star
    s = np.arange(6) / 5.0
    idx = {n: model.joint_index(n) for n in model.joint_names}
    swing_hip = amp * (2 * s - 1)
    coeffs[idx["hip_pitch_r"]] += swing_hip
    coeffs[idx["hip_pitch_l"]] -= swing_hip
    coeffs[idx["ankle_pitch_l"]] += swing_hip  # keep the stance sole flat
    coeffs[idx["knee_pitch_r"]] -= knee_amp * np.sin(np.pi * s)
    coeffs[idx["shoulder_pitch_l"]] += 0.4 * swing_hip
    coeffs[idx["shoulder_pitch_r"]] -= 0.4 * swing_hip
    return coeffs


def optimize_gait(model: RobotModel, v_star: float, seed: int = 0,
                  budget: int = 2000, popsize: int = 16, kp: float = 400.0,
                  kd: float = 12.0, t_bounds: tuple[float, float] = (0.35, 1.1),
                  sigma0: float = 0.12, t_init: float | None = None) -> ReferenceGait:
    """Search for a periodic reference gait at one command velocity.

    Deterministic in (seed, budget). Raises :class:`InfeasibleGaitError` with
    best-found diagnostics if no candidate passes the fall/periodicity gate
    within the evaluation budget. The stride-period seed shortens with the
    commanded speed (fast walking needs a fast cadence basin).
    """
    if not 0.0 <= v_star <= 1.0:
        raise ValueError("v_star must lie in [0, 1]")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if t_init is None:
        t_init = 0.7 - 0.25 * v_star
    nj = model.nj

    def genome_to_gait_arrays(xs: np.ndarray):
        raw = xs[:, : nj * 6].reshape(-1, nj, 6)
        coeffs = np.stack([project_coeffs(c, model.mirror_perm, model.pos_lo, model.pos_hi)
                           for c in raw])
        T = np.clip(xs[:, -1], t_bounds[0], t_bounds[1])
        return coeffs, T

    def evaluate(xs: np.ndarray):
        coeffs, T = genome_to_gait_arrays(xs)
        metrics = rollout_gait_batch(model, coeffs, T, np.full(len(T), v_star),
                                     kp=kp, kd=kd)
        obj, feas = gait_objective(metrics, np.full(len(T), v_star), model)
        return obj, feas, metrics, T

    c0 = initial_candidate(model, v_star, t_init)
    x0 = np.concatenate([c0.reshape(-1), [t_init]])
    lower = np.concatenate([np.repeat(model.pos_lo, 6), [t_bounds[0]]])
    upper = np.concatenate([np.repeat(model.pos_hi, 6), [t_bounds[1]]])

    obj0, feas0, met0, T0 = evaluate(x0[None, :])
    best = {"x": x0, "obj": float(obj0[0]), "T": float(T0[0]),
            "feasible": bool(feas0[0]),
            "diag": {"objective": float(obj0[0]),
                     **{k: np.asarray(v)[0].tolist() for k, v in met0.items()}}}
    evals = 1

    es = RankMuES(x0, sigma0, lower, upper, popsize=popsize, seed=seed)
    while evals + es.lam <= budget:
        xs = es.ask()
        obj, feas, met, T = evaluate(xs)
        evals += len(xs)
        es.tell(xs, obj)
        i = int(np.argmin(obj))
        # lexicographic tie-break on equal objective: lower stride period wins
        if (obj[i], T[i]) < (best["obj"], best["T"]):
            best = {"x": xs[i].copy(), "obj": float(obj[i]), "T": float(T[i]),
                    "feasible": bool(feas[i]),
                    "diag": {"objective": float(obj[i]),
                             **{k: np.asarray(v)[i].tolist() for k, v in met.items()}}}

    if not best["feasible"]:
        raise InfeasibleGaitError(
            f"no feasible gait for v*={v_star} within budget {budget}", best["diag"])
    coeffs, T = genome_to_gait_arrays(best["x"][None, :])
    return make_gait(model, v_star, float(T[0]), coeffs[0])


# ------------------------------------------------------------------- library

@dataclass
class GaitLibrary:
    model_hash: str
    gaits: list[ReferenceGait]

    @property
    def grid(self) -> np.ndarray:
        return np.array([g.v_star for g in self.gaits])

    def query(self, command: float, phase: float):
        """Interpolated (q*, x*, T_gait) at a command velocity and phase.

        The command is clamped to the grid range; between grid points the two
        bracketing gaits are evaluated at the phase and blended linearly.
        """
        if not self.gaits:
            raise GaitLibraryError("empty gait library")
        grid = self.grid
        c = float(np.clip(command, grid[0], grid[-1]))
        i = int(np.searchsorted(grid, c, side="right") - 1)
        i = min(max(i, 0), len(grid) - 1)
        ga = self.gaits[i]
        if i == len(grid) - 1 or c == grid[i]:
            return ga.joints(phase), ga.feet(phase), ga.t_gait
        gb = self.gaits[i + 1]
        a = (c - grid[i]) / (grid[i + 1] - grid[i])
        q = (1 - a) * ga.joints(phase) + a * gb.joints(phase)
        x = (1 - a) * ga.feet(phase) + a * gb.feet(phase)
        t = (1 - a) * ga.t_gait + a * gb.t_gait
        return q, x, t

    def query_batch(self, command: np.ndarray, phase: np.ndarray):
        """Vectorized query for per-instance commands and phases.

        Returns (q* (B, nj), x* (B, nf, 2), T (B,)).
        """
        if not self.gaits:
            raise GaitLibraryError("empty gait library")
        grid = self.grid
        c = np.clip(command, grid[0], grid[-1])
        i = np.clip(np.searchsorted(grid, c, side="right") - 1, 0, len(grid) - 1)
        nj = self.gaits[0].coeffs.shape[0]
        nf = self.gaits[0].foot_samples.shape[1]
        B = len(c)
        q = np.zeros((B, nj))
        x = np.zeros((B, nf, 2))
        T = np.zeros(B)
        for gi in np.unique(i):
            mask = i == gi
            ga = self.gaits[gi]
            on_point = mask & ((gi == len(grid) - 1) | (c == grid[gi]))
            if on_point.any():
                q[on_point] = ga.joints(phase[on_point])
                x[on_point] = ga.feet(phase[on_point])
                T[on_point] = ga.t_gait
            between = mask & ~on_point
            if between.any():
                gb = self.gaits[gi + 1]
                a = ((c[between] - grid[gi]) / (grid[gi + 1] - grid[gi]))[:, None]
                q[between] = (1 - a) * ga.joints(phase[between]) + a * gb.joints(phase[between])
                x[between] = ((1 - a[..., None]) * ga.feet(phase[between])
                              + a[..., None] * gb.feet(phase[between]))
                T[between] = (1 - a[:, 0]) * ga.t_gait + a[:, 0] * gb.t_gait
        return q, x, T

    def t_gait(self, command: float) -> float:
        grid = self.grid
        c = float(np.clip(command, grid[0], grid[-1]))
        i = int(np.searchsorted(grid, c, side="right") - 1)
        i = min(max(i, 0), len(grid) - 1)
        if i == len(grid) - 1 or c == grid[i]:
            return self.gaits[i].t_gait
        a = (c - grid[i]) / (grid[i + 1] - grid[i])
        return (1 - a) * self.gaits[i].t_gait + a * self.gaits[i + 1].t_gait


def save_library(lib: GaitLibrary, path):
    doc = {
        "schema_version": LIBRARY_SCHEMA_VERSION,
        "model_hash": lib.model_hash,
        "grid": [float(g.v_star) for g in lib.gaits],
        "gaits": [
            {
                "v_star": float(g.v_star),
                "t_gait": float(g.t_gait),
                "coeffs": [[float(v) for v in row] for row in g.coeffs],
                "mirror_perm": [int(v) for v in g.mirror_perm],
                "foot_samples": [[[float(c) for c in p] for p in row]
                                 for row in g.foot_samples],
            }
            for g in lib.gaits
        ],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_library(path, expected_model_hash: str | None = None) -> GaitLibrary:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise GaitLibraryError(f"gait library does not parse: {e}") from e
    if doc.get("schema_version") != LIBRARY_SCHEMA_VERSION:
        raise GaitLibraryError(f"unsupported library schema {doc.get('schema_version')!r}")
    if expected_model_hash is not None and doc["model_hash"] != expected_model_hash:
        raise GaitLibraryError(
            f"library was built for model {doc['model_hash']}, not {expected_model_hash}")
    gaits = [
        ReferenceGait(
            v_star=g["v_star"],
            t_gait=g["t_gait"],
            coeffs=np.array(g["coeffs"]),
            mirror_perm=np.array(g["mirror_perm"], dtype=int),
            foot_samples=np.array(g["foot_samples"]),
        )
        for g in doc["gaits"]
    ]
    return GaitLibrary(model_hash=doc["model_hash"], gaits=gaits)


def build_library(model: RobotModel, grid=None, seed: int = 0, budget: int = 2000,
                  popsize: int = 16, workers: int | None = None,
                  progress=None) -> tuple[GaitLibrary, list[dict]]:
    """Optimize the full velocity grid; failures are reported, not raised.

    Returns the library of successful grid points plus a per-point report.
    Grid points are independent: each uses seed+round(10*v) so results do not
    depend on execution order or worker count.
    """
    if grid is None:
        grid = list(DEFAULT_GRID)
    workers = workers or int(os.environ.get("BIPEDLAB_WORKERS", "1"))
    jobs = [(model, float(v), seed + int(round(10 * v)), budget, popsize) for v in grid]
    outs: dict[int, tuple] = {}

    def note(i, out):
        outs[i] = out
        if progress:
            ok, payload = out
            progress({"v_star": float(grid[i]), "ok": ok,
                      **({"t_gait": payload.t_gait} if ok else {"error": payload})})

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor, as_completed
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = {ex.submit(_optimize_job, j): i for i, j in enumerate(jobs)}
            for fut in as_completed(futures):
                note(futures[fut], fut.result())
    else:
        for i, j in enumerate(jobs):
            note(i, _optimize_job(j))

    results: list[dict] = []
    gaits: list[ReferenceGait] = []
    for i, v in enumerate(grid):
        ok, payload = outs[i]
        if ok:
            gaits.append(payload)
            results.append({"v_star": float(v), "ok": True, "t_gait": payload.t_gait})
        else:
            results.append({"v_star": float(v), "ok": False, "error": payload})
    return GaitLibrary(model_hash=model.model_hash, gaits=gaits), results


def _optimize_job(job):
    model, v, seed, budget, popsize = job
    try:
        return True, optimize_gait(model, v, seed=seed, budget=budget, popsize=popsize)
    except InfeasibleGaitError as e:
        return False, f"{e} diagnostics={e.diagnostics}"
