"""Planar articulated rigid-body simulation with compliant ground contact.

The kernel is vectorized: a :class:`PlanarSim` advances B independent robot
instances at once (one per rollout agent). Dynamics are formed in generalized
coordinates q = (base x, z, pitch, joint angles...) via link Jacobians:

    M(q) = sum_l m_l J_l^T J_l + I_l w_l w_l^T        (w_l = angle-dependency row)
    dT/dq_d = -sum_l m_l W[l,d] (v_anchor_d x v_l)    (planar cross product)

and integrated in momentum form: p' = M(q) qd + dt * f, qd' = M(q')^-1 p'.
With the x coordinate cyclic this conserves horizontal momentum exactly
(discrete Noether), and the trapezoidal position update q' = q + dt*(qd+qd~)/2
reproduces constant-acceleration ballistics with no first-order bias.

Ground contact: spring-damper normal force (kn*penetration - dn*v_n, clamped
nonnegative) and Coulomb friction, resolved at the velocity level with a few
Gauss-Seidel sweeps so the damper is integrated implicitly. The stated kn/dn
constants are unstable under a purely explicit update for the light feet.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import RobotModel

DT_INNER = 1.0e-3  # fixed inner step, 1000 Hz

CONTACT_ACTIVE_FORCE = 0.1  # N, threshold for the contact 'active' flag


class SimulationDiverged(RuntimeError):
    """Non-finite state detected after a step; carries the prior state."""

    def __init__(self, state: "SimState"):
        super().__init__("simulation diverged (non-finite state)")
        self.state = state


@dataclass
class SimState:
    """Snapshot of a single simulation instance."""

    q: np.ndarray  # (nd,)
    qd: np.ndarray  # (nd,)
    t: float
    contact_active: np.ndarray  # (nc,) bool
    contact_force: np.ndarray  # (nc, 2) [tangential, normal], N
    swing_time: np.ndarray  # (nf,) s, per-foot time since last contact
    tau: np.ndarray  # (nj,) last applied joint torques
    touchdown_airtime: np.ndarray = None  # (nf,) sum of airtimes landed since last clear
    touchdown_count: np.ndarray = None  # (nf,)
    foot_rel_com: np.ndarray = None  # (nf, 2) foot centers relative to the CoM
    foot_normal_force: np.ndarray = None  # (nf,) summed normal force per foot, N


@dataclass
class PdCommand:
    """Joint-space PD setpoint; torques are clamped to the model limits."""

    targets: np.ndarray  # (nj,) rad
    kp: np.ndarray | float = 150.0
    kd: np.ndarray | float = 5.0


@dataclass
class Impulse:
    """Instantaneous momentum change applied to the torso."""

    linear: tuple[float, float] = (0.0, 0.0)  # N*s
    angular: float = 0.0  # N*m*s about pitch
    time: float = 0.0  # s, applied during the step covering [t, t+dt)
    body: str = "torso"


@dataclass
class Kin:
    """Batched kinematics evaluated at one configuration."""

    theta: np.ndarray  # (B, nl)
    origin: np.ndarray  # (B, nl, 2) link frame origins
    com: np.ndarray  # (B, nl, 2) link CoM positions
    anchors: np.ndarray  # (B, nd, 2) rotation anchor per dof (zeros for translations)
    jac: np.ndarray  # (B, nl, 2, nd) link CoM Jacobians
    mass_matrix: np.ndarray  # (B, nd, nd)
    minv: np.ndarray  # (B, nd, nd) inverse mass matrix
    com_total: np.ndarray  # (B, 2)
    contact_pos: np.ndarray  # (B, nc, 2)
    jac_contact: np.ndarray  # (B, nc, 2, nd)
    foot_pos: np.ndarray  # (B, nf, 2) foot centers


def _rot(theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate 2-vectors v by angles theta (broadcasting over leading dims)."""
    c, s = np.cos(theta), np.sin(theta)
    x, z = v[..., 0], v[..., 1]
    return np.stack([c * x - s * z, s * x + c * z], axis=-1)


def _perp(v: np.ndarray) -> np.ndarray:
    """90 deg CCW rotation: d/dtheta R(theta) v = perp(R(theta) v)."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _rot_links(theta: np.ndarray, offs: np.ndarray) -> np.ndarray:
    """Rotate per-link offsets (k, 2) by per-link angles (B, k) -> (B, k, 2)."""
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(theta.shape + (2,))
    out[..., 0] = c * offs[None, :, 0] - s * offs[None, :, 1]
    out[..., 1] = s * offs[None, :, 0] + c * offs[None, :, 1]
    return out


class PlanarSim:
    """B parallel instances of one robot model; single-threaded, deterministic."""

    def __init__(self, model: RobotModel, num: int = 1, contact_enabled: bool = True,
                 gs_sweeps: int = 6):
        self.model = model
        self.num = num
        self.contact_enabled = contact_enabled and model.contact_link.size > 0
        self.gs_sweeps = gs_sweeps
        nd, nj, nf, nc = model.nd, model.nj, len(model.foot_link), len(model.contact_link)
        self.q = np.zeros((num, nd))
        self.qd = np.zeros((num, nd))
        self.t = np.zeros(num)
        self.tau = np.zeros((num, nj))
        self.contact_force = np.zeros((num, nc, 2))  # [tangential, normal]
        self.in_contact = np.zeros((num, nf), dtype=bool)
        self.swing_time = np.zeros((num, nf))
        self.touchdown_airtime = np.zeros((num, nf))
        self.touchdown_count = np.zeros((num, nf))
        self.energy_abs = np.zeros(num)  # integral of sum |tau_i * qd_i| dt
        self.energy_pos = np.zeros(num)  # positive-work part only
        self.diverged = np.zeros(num, dtype=bool)
        # per-instance physical parameters (domain randomization hooks)
        self.mass_scale = np.ones(num)
        self.gain_scale = np.ones(num)
        self.mu = np.full(num, model.contact_mu)
        self._kin: Kin | None = None
        # constant angular inertia contribution of the mass matrix (per unit scale)
        W = model.angle_dep
        self._m_ang_unit_sum = np.einsum("ld,le,l->de", W, W, model.inertias)
        self._anchor_owner = np.zeros(nd, dtype=int)
        for l in range(model.nl):
            j = model.joint_of_link[l]
            if j >= 0:
                self._anchor_owner[model.nb + j] = l
        # links grouped by tree depth for vectorized FK
        depth = np.zeros(model.nl, dtype=int)
        for l in range(model.nl):
            if model.parent_idx[l] >= 0:
                depth[l] = depth[model.parent_idx[l]] + 1
        self._levels = []
        for d in range(1, depth.max() + 1 if model.nl > 1 else 1):
            links = np.where(depth == d)[0]
            if links.size:
                self._levels.append((links, model.parent_idx[links],
                                     model.nb + model.joint_of_link[links]))
        # double-buffered Jacobian storage (the cached Kin of the previous
        # configuration may still reference the other buffer)
        P = model.nl + len(model.contact_link)
        self._jbuf = [np.empty((num, P, 2, nd)), np.empty((num, P, 2, nd))]
        self._jbuf_idx = 0

    # ------------------------------------------------------------------ state

    def set_state(self, q: np.ndarray, qd: np.ndarray, t: float | np.ndarray = 0.0,
                  rows: np.ndarray | None = None):
        """Install state on all instances (or on the boolean/index subset ``rows``)."""
        if rows is None:
            rows = slice(None)
        self.q[rows] = q
        self.qd[rows] = qd
        self.t[rows] = t
        self.tau[rows] = 0.0
        self.contact_force[rows] = 0.0
        self.swing_time[rows] = 0.0
        self.touchdown_airtime[rows] = 0.0
        self.touchdown_count[rows] = 0.0
        self.energy_abs[rows] = 0.0
        self.energy_pos[rows] = 0.0
        self.diverged[rows] = False
        self._kin = None
        # feet start "in contact" iff geometrically touching, so a spawn does
        # not count as a touchdown event
        kin = self.kinematics()
        if self.contact_enabled:
            pen = -kin.contact_pos[..., 1]
            touching = pen > 0.0
            nf = len(self.model.foot_link)
            per_foot = np.zeros((self.num, nf), dtype=bool)
            for f in range(nf):
                per_foot[:, f] = touching[:, self.model.contact_foot == f].any(axis=1)
            self.in_contact[rows] = per_foot[rows]

    def state(self, i: int = 0) -> SimState:
        forces = self.contact_force[i].copy()
        kin = self.kinematics()
        m = self.model
        nf = len(m.foot_link)
        fn = np.array([forces[m.contact_foot == f, 1].sum() for f in range(nf)])
        return SimState(
            q=self.q[i].copy(),
            qd=self.qd[i].copy(),
            t=float(self.t[i]),
            contact_active=forces[:, 1] > CONTACT_ACTIVE_FORCE,
            contact_force=forces,
            swing_time=self.swing_time[i].copy(),
            tau=self.tau[i].copy(),
            touchdown_airtime=self.touchdown_airtime[i].copy(),
            touchdown_count=self.touchdown_count[i].copy(),
            foot_rel_com=kin.foot_pos[i] - kin.com_total[i],
            foot_normal_force=fn,
        )

    def clear_touchdowns(self):
        self.touchdown_airtime[:] = 0.0
        self.touchdown_count[:] = 0.0

    # ------------------------------------------------------------- kinematics

    def kinematics(self, q: np.ndarray | None = None) -> Kin:
        """Forward kinematics, Jacobians, and mass matrix for the batch."""
        if q is None:
            if self._kin is not None:
                return self._kin
            q = self.q
        m = self.model
        B, nl, nb, nd = q.shape[0], m.nl, m.nb, m.nd
        nc, nf = m.contact_link.size, m.foot_link.size

        theta = np.empty((B, nl))
        origin = np.empty((B, nl, 2))
        if m.floating_base:
            theta[:, 0] = q[:, 2]
            origin[:, 0] = q[:, :2]
        else:
            theta[:, 0] = m.base_angle
            origin[:, 0] = m.base_origin
        for links, pars, dofs in self._levels:
            th_p = theta[:, pars]
            off = m.anchor_off[links]
            c, s = np.cos(th_p), np.sin(th_p)
            origin[:, links, 0] = origin[:, pars, 0] + c * off[:, 0] - s * off[:, 1]
            origin[:, links, 1] = origin[:, pars, 1] + s * off[:, 0] + c * off[:, 1]
            theta[:, links] = th_p + q[:, dofs]
        com = origin + _rot_links(theta, m.com_off)

        anchors = np.zeros((B, nd, 2))
        if m.floating_base:
            anchors[:, 2] = q[:, :2]
        for l in range(nl):
            j = m.joint_of_link[l]
            if j >= 0:
                anchors[:, nb + j] = origin[:, l]

        # one stacked Jacobian for [link CoMs, contact points]
        if nc:
            cpos = origin[:, m.contact_link] + _rot_links(theta[:, m.contact_link], m.contact_off)
            P = np.concatenate([com, cpos], axis=1)
            own = np.concatenate([np.arange(nl), m.contact_link])
        else:
            cpos = np.zeros((B, 0, 2))
            P, own = com, np.arange(nl)
        if nf:
            fpos = origin[:, m.foot_link] + _rot_links(theta[:, m.foot_link], m.foot_center)
        else:
            fpos = np.zeros((B, 0, 2))
        J = self._point_jacobian(P, own, anchors)
        jac = J[:, :nl]
        jac_contact = J[:, nl:nl + nc]

        masses = m.masses[None, :] * self.mass_scale[:, None]
        Jf = jac.reshape(B, 2 * nl, nd)
        w = np.repeat(masses, 2, axis=1)  # (B, 2*nl), mass per Jacobian row
        mass_matrix = Jf.transpose(0, 2, 1) @ (Jf * w[:, :, None])
        mass_matrix += self._m_ang_unit_sum[None, :, :] * self.mass_scale[:, None, None]
        minv = np.linalg.inv(mass_matrix)
        com_total = (masses[:, :, None] * com).sum(axis=1) / masses.sum(axis=1)[:, None]

        return Kin(theta, origin, com, anchors, jac, mass_matrix, minv,
                   com_total, cpos, jac_contact, fpos)

    def _point_jacobian(self, pts: np.ndarray, owner: np.ndarray, anchors: np.ndarray):
        """Jacobian of world points fixed to ``owner`` links. (B, np, 2, nd)."""
        m = self.model
        npts = pts.shape[1]
        if pts.shape[0] == self.num and npts == self._jbuf[0].shape[1]:
            self._jbuf_idx ^= 1
            J = self._jbuf[self._jbuf_idx]
        else:
            J = np.empty((pts.shape[0], npts, 2, m.nd))
        mask = m.angle_dep[owner]  # (np, nd); zero in translation columns
        # angle columns: perp(point - anchor); translation columns: identity
        np.multiply(-(pts[:, :, None, 1] - anchors[:, None, :, 1]), mask, out=J[:, :, 0, :])
        np.multiply(pts[:, :, None, 0] - anchors[:, None, :, 0], mask, out=J[:, :, 1, :])
        if m.floating_base:
            J[:, :, 0, 0] = 1.0
            J[:, :, 1, 1] = 1.0
        return J

    # ------------------------------------------------------------------ step

    def step_batch(self, targets: np.ndarray, kp, kd,
                   gen_impulse: np.ndarray | None = None, dt: float = DT_INNER):
        """Advance every instance by one inner step.

        ``targets`` (B, nj) are PD position setpoints; ``kp``/``kd`` broadcast
        over (B, nj). ``gen_impulse`` (B, nd) is an optional generalized
        impulse applied during this step. Instances already flagged as
        diverged are frozen in place.
        """
        m = self.model
        nb, nj = m.nb, m.nj
        kin = self.kinematics()
        q, qd = self.q, self.qd

        qj, qdj = q[:, nb:], qd[:, nb:]
        gain = self.gain_scale[:, None]
        tau = np.clip(gain * kp * (targets - qj) - gain * kd * qdj,
                      -m.torque_limit[None, :], m.torque_limit[None, :])
        self.tau = tau

        masses = m.masses[None, :] * self.mass_scale[:, None]
        # velocity-product term dT/dq_d = -sum_l m_l W[l,d] (vA_d x v_l), with the
        # anchor velocity taken from its owner link: vA = v_com + w * perp(A - com)
        v_link = (kin.jac.reshape(self.num, -1, m.nd) @ qd[:, :, None]).reshape(self.num, -1, 2)
        omega = qd @ m.angle_dep.T  # (B, nl)
        own = self._anchor_owner
        rel = kin.anchors - kin.com[:, own]  # (B, nd, 2)
        v_anchor = v_link[:, own] + omega[:, own, None] * _perp(rel)
        cross = (v_anchor[:, :, None, 0] * v_link[:, None, :, 1] -
                 v_anchor[:, :, None, 1] * v_link[:, None, :, 0])  # (B, nd, nl)
        dTdq = -np.einsum("bdl,bl,ld->bd", cross, masses, m.angle_dep)

        grav = -m.gravity * np.einsum("bld,bl->bd", kin.jac[:, :, 1, :], masses)
        f = dTdq + grav
        f[:, nb:] += tau

        p = (kin.mass_matrix @ qd[:, :, None])[:, :, 0] + dt * f
        if gen_impulse is not None:
            p = p + gen_impulse

        if self.contact_enabled:
            qd_free = (kin.minv @ p[:, :, None])[:, :, 0]
            imp_flat, dv = self._contact_impulses(kin, qd_free, dt)
            Jcf = kin.jac_contact.reshape(self.num, -1, m.nd)
            p = p + (Jcf.transpose(0, 2, 1) @ imp_flat[:, :, None])[:, :, 0]
            qd_mid = qd_free + dv
        else:
            self.contact_force[:] = 0.0
            qd_mid = (kin.minv @ p[:, :, None])[:, :, 0]

        q_new = q + dt * 0.5 * (qd + qd_mid)
        kin_new = self.kinematics(q_new)
        qd_new = (kin_new.minv @ p[:, :, None])[:, :, 0]

        bad = ~(np.isfinite(q_new).all(axis=1) & np.isfinite(qd_new).all(axis=1))
        bad |= self.diverged
        if bad.any():
            q_new[bad] = q[bad]
            qd_new[bad] = qd[bad]
            self.diverged |= bad

        # energy metering with midpoint joint velocities
        qd_mid_j = 0.5 * (qdj + qd_new[:, nb:])
        power = tau * qd_mid_j
        self.energy_abs += dt * np.abs(power).sum(axis=1)
        self.energy_pos += dt * np.maximum(power, 0.0).sum(axis=1)

        self.q, self.qd = q_new, qd_new
        self.t = self.t + dt
        # kin_new is only valid if no row was frozen back to its prior q
        self._kin = None if bad.any() else kin_new

        self._update_swing_timers(dt)
        return tau

    def _contact_impulses(self, kin: Kin, qd_free: np.ndarray, dt: float):
        """Velocity-level solve of the compliant contact forces.

        Normal: impulse of the spring-damper law with the damper implicit,
        j_n = dt*(kn*pen - dn*v_n') / (1 + dt*dn*w_nn), clamped >= 0.
        Tangential: regularized stiction impulse clamped to the friction cone.
        Solved by staggered projected Jacobi sweeps (normals, then tangents,
        vectorized over contacts) against the contact-space inverse inertia.
        Returns the flattened impulses (B, 2*nc) and the velocity change
        M^-1 Jc^T j for reuse.
        """
        m = self.model
        B, nc, nd = self.num, m.contact_link.size, m.nd
        kn, dn = m.contact_kn, m.contact_dn
        pen = -kin.contact_pos[..., 1]  # (B, nc)
        active = pen > 0.0

        Jc = kin.jac_contact.reshape(B, 2 * nc, nd)
        X = kin.minv @ Jc.transpose(0, 2, 1)  # (B, nd, 2nc)
        Wm = Jc @ X  # (B, 2nc, 2nc)
        v_free = (Jc @ qd_free[:, :, None])[:, :, 0]

        tin = np.arange(0, 2 * nc, 2)  # tangential rows
        nin = tin + 1  # normal rows
        diag = np.einsum("brr->br", Wm)
        wn, wt = diag[:, nin], diag[:, tin]
        j = np.zeros((B, 2 * nc))
        relax = 0.9
        for _ in range(self.gs_sweeps):
            v = v_free + (Wm @ j[:, :, None])[:, :, 0]
            v_other = v[:, nin] - wn * j[:, nin]
            jn = dt * (kn * pen - dn * v_other) / (1.0 + dt * dn * wn)
            jn = np.where(active, np.maximum(jn, 0.0), 0.0)
            j[:, nin] += relax * (jn - j[:, nin])
            v = v_free + (Wm @ j[:, :, None])[:, :, 0]
            v_other = v[:, tin] - wt * j[:, tin]
            jt = -v_other / (wt * 1.001 + 1e-12)
            cap = self.mu[:, None] * j[:, nin]
            jt = np.where(active, np.clip(jt, -cap, cap), 0.0)
            j[:, tin] += relax * (jt - j[:, tin])

        self.contact_force = (j / dt).reshape(B, nc, 2)
        dv = (X @ j[:, :, None])[:, :, 0]
        return j, dv

    def _update_swing_timers(self, dt: float):
        m = self.model
        nf = len(m.foot_link)
        if nf == 0:
            return
        fn = self.contact_force[..., 1]
        now = np.zeros((self.num, nf), dtype=bool)
        for f in range(nf):
            now[:, f] = (fn[:, m.contact_foot == f] > CONTACT_ACTIVE_FORCE).any(axis=1)
        touchdown = now & ~self.in_contact
        self.touchdown_airtime += np.where(touchdown, self.swing_time, 0.0)
        self.touchdown_count += touchdown
        self.swing_time = np.where(now, 0.0, self.swing_time + dt)
        self.in_contact = now

    # ------------------------------------------------------------- utilities

    def torso_impulse_gen(self, linear: np.ndarray, angular: np.ndarray) -> np.ndarray:
        """Generalized impulse for a torso-applied (linear, angular) impulse."""
        kin = self.kinematics()
        gen = np.einsum("bud,bu->bd", kin.jac[:, 0], linear)
        gen += self.model.angle_dep[0][None, :] * angular[:, None]
        return gen

    def base_velocity(self) -> np.ndarray:
        return self.qd[:, : self.model.nb]

    def foot_positions_rel_com(self) -> np.ndarray:
        kin = self.kinematics()
        return kin.foot_pos - kin.com_total[:, None, :]


# ----------------------------------------------------------- single-instance


def step(model: RobotModel, state: SimState, pd: PdCommand,
         impulses: list[Impulse] | None = None, dt: float = DT_INNER,
         contact_enabled: bool = True, _sim: PlanarSim | None = None) -> SimState:
    """Advance one instance by one inner step (thin wrapper over the batch kernel).

    Raises :class:`SimulationDiverged` carrying the prior state if the update
    produces non-finite values. Impulses whose time falls within [t, t+dt) are
    applied as instantaneous velocity changes.
    """
    sim = _sim if _sim is not None else PlanarSim(model, num=1, contact_enabled=contact_enabled)
    sim.contact_enabled = contact_enabled and model.contact_link.size > 0
    sim.set_state(state.q[None, :], state.qd[None, :], state.t)
    sim.swing_time[0] = state.swing_time
    sim.touchdown_airtime[0] = state.touchdown_airtime if state.touchdown_airtime is not None else 0.0
    sim.touchdown_count[0] = state.touchdown_count if state.touchdown_count is not None else 0.0

    gen = None
    for imp in impulses or []:
        if state.t <= imp.time < state.t + dt:
            g = sim.torso_impulse_gen(np.array([imp.linear]), np.array([imp.angular]))
            gen = g if gen is None else gen + g

    kp = np.asarray(pd.kp, dtype=float)
    kd = np.asarray(pd.kd, dtype=float)
    sim.step_batch(pd.targets[None, :], kp, kd, gen_impulse=gen, dt=dt)
    if sim.diverged[0]:
        raise SimulationDiverged(state)
    return sim.state(0)


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """M(q) for a single configuration; symmetric positive definite."""
    sim = PlanarSim(model, num=1, contact_enabled=False)
    sim.q[0] = q
    return sim.kinematics().mass_matrix[0]


def com_position(model: RobotModel, q: np.ndarray) -> np.ndarray:
    sim = PlanarSim(model, num=1, contact_enabled=False)
    sim.q[0] = q
    return sim.kinematics().com_total[0]


def foot_positions(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Per-foot (x, z) of the foot centers relative to the whole-body CoM."""
    sim = PlanarSim(model, num=1, contact_enabled=False)
    sim.q[0] = q
    kin = sim.kinematics()
    return kin.foot_pos[0] - kin.com_total[0]


def mechanical_energy(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> float:
    """Kinetic plus gravitational potential energy (potential zero at z=0)."""
    sim = PlanarSim(model, num=1, contact_enabled=False)
    sim.q[0], sim.qd[0] = q, qd
    kin = sim.kinematics()
    ke = 0.5 * float(qd @ kin.mass_matrix[0] @ qd)
    pe = model.gravity * float((model.masses * kin.com[0, :, 1]).sum())
    return ke + pe


def dump_trajectory(path, model: RobotModel, rows: list[dict]):
    """Write a rollout to CSV: t,q0..qN,qd0..qdN,tau0..tauM,Fl,Fr."""
    nd, nj = model.nd, model.nj
    header = (["t"] + [f"q{i}" for i in range(nd)] + [f"qd{i}" for i in range(nd)]
              + [f"tau{i}" for i in range(nj)] + ["Fl", "Fr"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(r["t"]))]
                       + [repr(float(v)) for v in r["q"]]
                       + [repr(float(v)) for v in r["qd"]]
                       + [repr(float(v)) for v in r["tau"]]
                       + [repr(float(r["Fl"])), repr(float(r["Fr"]))])
