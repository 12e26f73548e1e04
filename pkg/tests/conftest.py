import numpy as np
import pytest
import yaml

from bipedlab.model import build_model, default_model_path, load_default_model


@pytest.fixture(scope="session")
def model():
    return load_default_model()


@pytest.fixture(scope="session")
def model_raw():
    with open(default_model_path()) as fh:
        return yaml.safe_load(fh)


@pytest.fixture(scope="session")
def stiff_model(model_raw):
    """PD gains above the inverted-pendulum stiffness bound: a zero-action
    policy then stands indefinitely, which eval-harness schema tests need."""
    raw = yaml.safe_load(yaml.safe_dump(model_raw))
    raw["pd_default"] = {"kp": 1000.0, "kd": 30.0}
    return build_model(raw)


@pytest.fixture(scope="session")
def stiff_library(stiff_model):
    from bipedlab.gaitlib import GaitLibrary, initial_candidate, make_gait

    gaits = [make_gait(stiff_model, v, 0.7, initial_candidate(stiff_model, v, 0.7))
             for v in (0.0, 0.5, 1.0)]
    return GaitLibrary(model_hash=stiff_model.model_hash, gaits=gaits)


@pytest.fixture(scope="session")
def tiny_library(model):
    """Unoptimized but structurally valid gait library (fast to build)."""
    from bipedlab.gaitlib import GaitLibrary, initial_candidate, make_gait

    gaits = [make_gait(model, v, 0.7 - 0.1 * v, initial_candidate(model, v, 0.7))
             for v in (0.0, 0.4, 0.5, 1.0)]
    return GaitLibrary(model_hash=model.model_hash, gaits=gaits)


@pytest.fixture()
def pendulum_model():
    """Point-mass pendulum on a welded mount: 1x1 mass matrix oracle."""
    doc = {
        "model_schema": 1,
        "name": "pendulum",
        "gravity": 9.81,
        "base": {"type": "fixed", "origin": [0.0, 1.0]},
        "links": [
            {"name": "mount", "mass": 0.001, "inertia": 1e-6, "com": [0.0, 0.0],
             "parent": None, "joint": None, "anchor": [0.0, 0.0]},
            {"name": "rod", "mass": 2.5, "inertia": 0.04, "com": [0.0, -0.3],
             "parent": "mount", "joint": "pivot", "anchor": [0.0, 0.0]},
        ],
        "joints": [
            {"name": "pivot", "pos_lo": -10.0, "pos_hi": 10.0,
             "vel_limit": 100.0, "torque_limit": 50.0},
        ],
    }
    return build_model(doc)


def fixed_base_variant(model_raw, origin=(0.0, 2.0)):
    raw = yaml.safe_load(yaml.safe_dump(model_raw))
    raw["base"]["type"] = "fixed"
    raw["base"]["origin"] = list(origin)
    return build_model(raw)


def symmetric_feet_variant(model_raw):
    """Variant with fore-aft symmetric feet; the straight pose is then an
    exact zero-torque equilibrium and mirrored poses are exact reflections."""
    raw = yaml.safe_load(yaml.safe_dump(model_raw))
    for c in raw["contacts"]:
        c["point"][0] = -0.125 if "heel" in c["name"] else 0.125
    for f in raw["feet"]:
        f["center"][0] = 0.0
    for l in raw["links"]:
        if l["name"].startswith("foot"):
            l["com"][0] = 0.0
    return build_model(raw)


def settled_standing_sim(model, num=1, kp=150.0, kd=5.0, settle_s=2.0, pose=None):
    """Standing robot settled under PD so contact transients have died out."""
    from bipedlab.sim import PlanarSim

    sim = PlanarSim(model, num=num)
    pose = model.nominal_pose if pose is None else pose
    q0 = model.standing_q()
    q0[model.nb:] = pose
    q0[1] = standing_height(model, pose)
    q0[1] -= model.total_mass * model.gravity / (model.contact_kn * 4)
    sim.set_state(np.tile(q0, (num, 1)), np.zeros((num, model.nd)))
    targets = np.tile(pose, (num, 1))
    for _ in range(int(settle_s * 1000)):
        sim.step_batch(targets, kp, kd)
    return sim


def standing_height(model, pose):
    """Pelvis height that puts the lowest contact point exactly at the ground."""
    from bipedlab.sim import PlanarSim

    sim = PlanarSim(model, num=1)
    q = model.standing_q()
    q[model.nb:] = pose
    sim.q[0] = q
    kin = sim.kinematics()
    return float(q[1] - kin.contact_pos[0, :, 1].min())
