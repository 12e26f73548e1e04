"""Robot description: loading, validation, and derived kinematic constants.

A model file is a small YAML document (``model_schema: 1``) listing links,
joints, ground-contact points, and the nominal standing pose. Loading produces
a validated, immutable :class:`RobotModel` whose derived arrays (tree indices,
angle-dependency matrix, mirror permutation) are what the simulator consumes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

MODEL_SCHEMA_VERSION = 1

NB_FLOATING = 3  # planar floating base: x, z, pitch


class ModelError(ValueError):
    """Malformed or physically inconsistent robot description."""


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float
    inertia: float  # about the link CoM, kg*m^2
    com: tuple[float, float]  # CoM offset in the link frame, m
    parent: str | None
    joint: str | None
    anchor: tuple[float, float]  # joint anchor in the parent frame, m


@dataclass(frozen=True)
class JointSpec:
    name: str
    pos_lo: float
    pos_hi: float
    vel_limit: float  # rad/s
    torque_limit: float  # N*m


@dataclass(frozen=True)
class RobotModel:
    """Validated planar articulated model plus precomputed tree constants."""

    name: str
    gravity: float
    floating_base: bool
    nominal_height: float
    links: tuple[LinkSpec, ...]
    joints: tuple[JointSpec, ...]
    model_hash: str
    base_origin: tuple[float, float] = (0.0, 0.0)  # world pose of a fixed base
    base_angle: float = 0.0

    # derived arrays, filled by build_model
    parent_idx: np.ndarray = field(repr=False, default=None)  # (nl,) int, -1 for root
    joint_of_link: np.ndarray = field(repr=False, default=None)  # (nl,) int, -1 if welded
    anchor_off: np.ndarray = field(repr=False, default=None)  # (nl, 2)
    com_off: np.ndarray = field(repr=False, default=None)  # (nl, 2)
    masses: np.ndarray = field(repr=False, default=None)  # (nl,)
    inertias: np.ndarray = field(repr=False, default=None)  # (nl,)
    angle_dep: np.ndarray = field(repr=False, default=None)  # (nl, nd) 0/1, omega_l = W @ qd
    contact_link: np.ndarray = field(repr=False, default=None)  # (nc,) int
    contact_off: np.ndarray = field(repr=False, default=None)  # (nc, 2)
    contact_foot: np.ndarray = field(repr=False, default=None)  # (nc,) foot index or -1
    foot_link: np.ndarray = field(repr=False, default=None)  # (nf,) int
    foot_center: np.ndarray = field(repr=False, default=None)  # (nf, 2)
    mirror_perm: np.ndarray = field(repr=False, default=None)  # (nj,) joint permutation
    nominal_pose: np.ndarray = field(repr=False, default=None)  # (nj,)
    pos_lo: np.ndarray = field(repr=False, default=None)  # (nj,)
    pos_hi: np.ndarray = field(repr=False, default=None)
    vel_limit: np.ndarray = field(repr=False, default=None)
    torque_limit: np.ndarray = field(repr=False, default=None)
    kp_default: float = 150.0
    kd_default: float = 5.0
    contact_kn: float = 1.0e5
    contact_dn: float = 1.0e3
    contact_mu: float = 0.8

    @property
    def nl(self) -> int:
        return len(self.links)

    @property
    def nj(self) -> int:
        return len(self.joints)

    @property
    def nb(self) -> int:
        return NB_FLOATING if self.floating_base else 0

    @property
    def nd(self) -> int:
        return self.nb + self.nj

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def standing_q(self) -> np.ndarray:
        """Full generalized position vector for the nominal standing pose."""
        q = np.zeros(self.nd)
        if self.floating_base:
            q[1] = self.nominal_height
        q[self.nb:] = self.nominal_pose
        return q


def default_model_path() -> Path:
    return Path(resources.files("bipedlab").joinpath("data/default_biped.yaml"))


def _require(cond: bool, msg: str):
    if not cond:
        raise ModelError(msg)


def _get(d: dict, key: str, ctx: str):
    if key not in d:
        raise ModelError(f"missing key '{key}' in {ctx}")
    return d[key]


def build_model(source: str | Path | dict) -> RobotModel:
    """Load and validate a robot description.

    ``source`` may be a file path or an already-parsed document dict (used by
    tests to build variant models). Raises :class:`ModelError` naming the
    offending key on any malformed or inconsistent entry.
    """
    if isinstance(source, dict):
        raw = source
        raw_text = yaml.safe_dump(source, sort_keys=True)
    else:
        path = Path(source)
        if not path.exists():
            raise ModelError(f"model file not found: {path}")
        raw_text = path.read_text()
        try:
            raw = yaml.safe_load(raw_text)
        except yaml.YAMLError as e:
            raise ModelError(f"model file does not parse as YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ModelError("model file must contain a YAML mapping")

    schema = _get(raw, "model_schema", "model file")
    _require(schema == MODEL_SCHEMA_VERSION, f"unsupported model_schema {schema!r}")

    gravity = float(_get(raw, "gravity", "model file"))
    _require(gravity > 0, "key 'gravity' must be positive")

    base = _get(raw, "base", "model file")
    base_type = _get(base, "type", "base")
    _require(base_type in ("floating", "fixed"), f"base 'type' must be floating|fixed, got {base_type!r}")
    floating = base_type == "floating"
    nominal_height = float(base.get("nominal_height", 0.0))

    links = []
    for i, entry in enumerate(_get(raw, "links", "model file")):
        ctx = f"links[{i}]"
        link = LinkSpec(
            name=str(_get(entry, "name", ctx)),
            mass=float(_get(entry, "mass", ctx)),
            inertia=float(_get(entry, "inertia", ctx)),
            com=tuple(float(v) for v in _get(entry, "com", ctx)),
            parent=entry.get("parent"),
            joint=entry.get("joint"),
            anchor=tuple(float(v) for v in _get(entry, "anchor", ctx)),
        )
        _require(link.mass > 0, f"link '{link.name}': key 'mass' must be > 0")
        _require(link.inertia > 0, f"link '{link.name}': key 'inertia' must be > 0")
        links.append(link)
    _require(len(links) > 0, "key 'links' must be non-empty")

    names = [l.name for l in links]
    _require(len(set(names)) == len(names), "duplicate link 'name'")
    roots = [l for l in links if l.parent is None]
    _require(len(roots) == 1, "exactly one link must have parent: null")
    _require(roots[0].joint is None, "the root link must have joint: null")

    joints = []
    for i, entry in enumerate(_get(raw, "joints", "model file")):
        ctx = f"joints[{i}]"
        joint = JointSpec(
            name=str(_get(entry, "name", ctx)),
            pos_lo=float(_get(entry, "pos_lo", ctx)),
            pos_hi=float(_get(entry, "pos_hi", ctx)),
            vel_limit=float(_get(entry, "vel_limit", ctx)),
            torque_limit=float(_get(entry, "torque_limit", ctx)),
        )
        _require(joint.pos_lo < joint.pos_hi, f"joint '{joint.name}': pos_lo must be < pos_hi")
        _require(joint.vel_limit > 0, f"joint '{joint.name}': key 'vel_limit' must be > 0")
        _require(joint.torque_limit > 0, f"joint '{joint.name}': key 'torque_limit' must be > 0")
        joints.append(joint)

    joint_names = [j.name for j in joints]
    _require(len(set(joint_names)) == len(joint_names), "duplicate joint 'name'")
    link_joints = [l.joint for l in links if l.joint is not None]
    _require(sorted(link_joints) == sorted(joint_names),
             "keys 'joints' and links' 'joint' entries must match one-to-one")

    # topological order: parents before children
    index = {n: i for i, n in enumerate(names)}
    order, seen = [], set()

    def visit(i: int):
        if names[i] in seen:
            raise ModelError(f"link '{names[i]}' reached twice; tree has a cycle")
        seen.add(names[i])
        order.append(i)
        for k, l in enumerate(links):
            if l.parent == names[i]:
                visit(k)

    visit(index[roots[0].name])
    _require(len(order) == len(links), "links do not form a single tree (unknown 'parent'?)")
    links = [links[i] for i in order]
    index = {l.name: i for i, l in enumerate(links)}

    nl, nj = len(links), len(joints)
    nb = NB_FLOATING if floating else 0
    nd = nb + nj
    jidx = {n: i for i, n in enumerate(joint_names)}

    parent_idx = np.array([index[l.parent] if l.parent else -1 for l in links], dtype=int)
    joint_of_link = np.array([jidx[l.joint] if l.joint else -1 for l in links], dtype=int)
    anchor_off = np.array([l.anchor for l in links])
    com_off = np.array([l.com for l in links])
    masses = np.array([l.mass for l in links])
    inertias = np.array([l.inertia for l in links])

    # angle dependency: omega_link = angle_dep @ qd
    angle_dep = np.zeros((nl, nd))
    for i, l in enumerate(links):
        if l.parent is None:
            if floating:
                angle_dep[i, 2] = 1.0
        else:
            angle_dep[i] = angle_dep[parent_idx[i]]
            angle_dep[i, nb + joint_of_link[i]] = 1.0

    contact_entries = raw.get("contacts", [])
    contact_link = np.array([index[_get(c, "link", "contacts")] for c in contact_entries], dtype=int)
    contact_off = (np.array([c["point"] for c in contact_entries], dtype=float)
                   if contact_entries else np.zeros((0, 2)))

    feet_entries = raw.get("feet", [])
    foot_link = np.array([index[_get(f, "link", "feet")] for f in feet_entries], dtype=int)
    foot_center = (np.array([f["center"] for f in feet_entries], dtype=float)
                   if feet_entries else np.zeros((0, 2)))
    foot_of = {int(l): k for k, l in enumerate(foot_link)}
    contact_foot = np.array([foot_of.get(int(l), -1) for l in contact_link], dtype=int)

    mirror_perm = np.arange(nj)
    for pair in raw.get("mirror", []):
        a, b = jidx[pair[0]], jidx[pair[1]]
        mirror_perm[a], mirror_perm[b] = b, a

    pose_map = raw.get("nominal_pose", {})
    nominal_pose = np.array([float(pose_map.get(n, 0.0)) for n in joint_names])
    for n in pose_map:
        _require(n in jidx, f"nominal_pose names unknown joint '{n}'")

    pos_lo = np.array([j.pos_lo for j in joints])
    pos_hi = np.array([j.pos_hi for j in joints])
    _require(bool(np.all(nominal_pose >= pos_lo) and np.all(nominal_pose <= pos_hi)),
             "key 'nominal_pose' must lie within joint position limits")

    pd = raw.get("pd_default", {})
    cp = raw.get("contact_params", {})

    model_hash = hashlib.sha256(
        yaml.safe_dump(raw, sort_keys=True).encode()).hexdigest()[:16]

    return RobotModel(
        name=str(raw.get("name", "unnamed")),
        gravity=gravity,
        floating_base=floating,
        nominal_height=nominal_height,
        base_origin=tuple(float(v) for v in base.get("origin", (0.0, 0.0))),
        base_angle=float(base.get("angle", 0.0)),
        links=tuple(links),
        joints=tuple(joints),
        model_hash=model_hash,
        parent_idx=parent_idx,
        joint_of_link=joint_of_link,
        anchor_off=anchor_off,
        com_off=com_off,
        masses=masses,
        inertias=inertias,
        angle_dep=angle_dep,
        contact_link=contact_link,
        contact_off=contact_off,
        contact_foot=contact_foot,
        foot_link=foot_link,
        foot_center=foot_center,
        mirror_perm=mirror_perm,
        nominal_pose=nominal_pose,
        pos_lo=pos_lo,
        pos_hi=pos_hi,
        vel_limit=np.array([j.vel_limit for j in joints]),
        torque_limit=np.array([j.torque_limit for j in joints]),
        kp_default=float(pd.get("kp", 150.0)),
        kd_default=float(pd.get("kd", 5.0)),
        contact_kn=float(cp.get("kn", 1.0e5)),
        contact_dn=float(cp.get("dn", 1.0e3)),
        contact_mu=float(cp.get("mu", 0.8)),
    )


def load_default_model() -> RobotModel:
    return build_model(default_model_path())
