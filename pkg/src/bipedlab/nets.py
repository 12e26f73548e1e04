"""Actor-critic MLPs with hand-written forward/backward passes.

Gradients are analytic (no autodiff); their correctness is pinned by central
finite differences in the test suite. The policy is a diagonal Gaussian with a
state-independent log-std vector. All math is float64 and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LOG_STD_BOUNDS = (-4.0, 1.0)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


def _init_mlp(rng, sizes, out_gain):
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        gain = out_gain if i == len(sizes) - 2 else np.sqrt(2.0)
        ws.append(_orthogonal(rng, (sizes[i], sizes[i + 1]), gain))
        bs.append(np.zeros(sizes[i + 1]))
    return ws, bs


@dataclass
class PolicyParams:
    """Actor/critic weights plus the global log-std vector."""

    actor_w: list = field(default_factory=list)
    actor_b: list = field(default_factory=list)
    critic_w: list = field(default_factory=list)
    critic_b: list = field(default_factory=list)
    log_std: np.ndarray = None

    def arrays(self) -> list[np.ndarray]:
        return (self.actor_w + self.actor_b + self.critic_w + self.critic_b
                + [self.log_std])

    def copy(self) -> "PolicyParams":
        return PolicyParams([w.copy() for w in self.actor_w],
                            [b.copy() for b in self.actor_b],
                            [w.copy() for w in self.critic_w],
                            [b.copy() for b in self.critic_b],
                            self.log_std.copy())


def init_params(obs_dim: int, act_dim: int, hidden=(512, 256, 128),
                seed: int = 0, init_log_std: float = 0.0) -> PolicyParams:
    rng = np.random.default_rng(np.random.PCG64(seed))
    aw, ab = _init_mlp(rng, (obs_dim, *hidden, act_dim), out_gain=0.01)
    cw, cb = _init_mlp(rng, (obs_dim, *hidden, 1), out_gain=1.0)
    return PolicyParams(aw, ab, cw, cb, np.full(act_dim, float(init_log_std)))


def mlp_forward(ws, bs, x, cache: list | None = None):
    """Forward pass with elu hidden activations.

    elu(z) = max(z,0) + e - 1 and elu'(z) = e with e = exp(min(z,0)), so one
    exponential serves both passes; ``cache`` collects (input, e) per layer.
    """
    h = x
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = h @ w + b
        if i == len(ws) - 1:
            if cache is not None:
                cache.append((h, None))
            return z
        e = np.exp(np.minimum(z, 0.0))
        if cache is not None:
            cache.append((h, e))
        h = np.maximum(z, 0.0) + e - 1.0
    return h


def mlp_backward(ws, cache, dout):
    """Gradients of the MLP given dL/d(output); returns (dws, dbs, dx)."""
    dws = [None] * len(ws)
    dbs = [None] * len(ws)
    delta = dout
    for i in reversed(range(len(ws))):
        h, e = cache[i]
        if i != len(ws) - 1:
            delta = delta * e
        dws[i] = h.T @ delta
        dbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ ws[i].T
    return dws, dbs, delta @ ws[0].T


def forward(params: PolicyParams, obs: np.ndarray):
    """(action mean, log-std, value) for a batch or a single observation."""
    obs = np.asarray(obs, dtype=float)
    if not np.isfinite(obs).all():
        raise ValueError("non-finite observation")
    single = obs.ndim == 1
    x = obs[None, :] if single else obs
    mean = mlp_forward(params.actor_w, params.actor_b, x)
    value = mlp_forward(params.critic_w, params.critic_b, x)[:, 0]
    if single:
        return mean[0], params.log_std.copy(), float(value[0])
    return mean, params.log_std.copy(), value


def log_prob(mean, log_std, action):
    """Diagonal-Gaussian log density, summed over action dimensions."""
    std = np.exp(log_std)
    z = (action - mean) / std
    return (-0.5 * z**2 - log_std - _HALF_LOG_2PI).sum(axis=-1)


def entropy(log_std) -> float:
    """Closed-form Gaussian entropy: sum(log_std + 0.5*log(2*pi*e))."""
    return float((log_std + _HALF_LOG_2PI + 0.5).sum())


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new):
    """KL(old || new) per sample for diagonal Gaussians."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    return ((log_std_new - log_std_old)
            + (var_old + (mean_new - mean_old) ** 2) / (2 * var_new)
            - 0.5).sum(axis=-1)


def sample_actions(params, obs, rng):
    """Stochastic policy sample: (action, log-prob, mean, value)."""
    mean, log_std, value = forward(params, obs)
    std = np.exp(log_std)
    action = mean + std * rng.standard_normal(mean.shape)
    return action, log_prob(mean, log_std, action), mean, value


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: PolicyParams, meta: dict | None = None):
    arrays = {}
    for i, w in enumerate(params.actor_w):
        arrays[f"actor_w{i}"] = w
    for i, b in enumerate(params.actor_b):
        arrays[f"actor_b{i}"] = b
    for i, w in enumerate(params.critic_w):
        arrays[f"critic_w{i}"] = w
    for i, b in enumerate(params.critic_b):
        arrays[f"critic_b{i}"] = b
    arrays["log_std"] = params.log_std
    arrays["meta"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with np.load(path) as z:
        n = sum(1 for k in z.files if k.startswith("actor_w"))
        params = PolicyParams(
            actor_w=[z[f"actor_w{i}"] for i in range(n)],
            actor_b=[z[f"actor_b{i}"] for i in range(n)],
            critic_w=[z[f"critic_w{i}"] for i in range(n)],
            critic_b=[z[f"critic_b{i}"] for i in range(n)],
            log_std=z["log_std"],
        )
        meta = json.loads(bytes(z["meta"]).decode()) if "meta" in z.files else {}
    return params, meta


class Adam:
    """Standard Adam with bias correction; state per parameter array."""

    def __init__(self, arrays: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            a -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
