"""Rank-mu evolution strategy for derivative-free trajectory search.

A (mu/mu_w, lambda) ES with weighted recombination, cumulative step-size
adaptation, and a rank-mu covariance update (the c1 rank-one term omitted).
Deterministic for a fixed seed. Candidates are repaired into box bounds
before evaluation and the repaired values are used for the update.
"""

from __future__ import annotations

import numpy as np


class RankMuES:
    def __init__(self, x0: np.ndarray, sigma0: float, lower: np.ndarray,
                 upper: np.ndarray, popsize: int | None = None, seed: int = 0):
        self.n = len(x0)
        self.rng = np.random.default_rng(np.random.PCG64(seed))
        self.lam = popsize or 4 + int(3 * np.log(self.n))
        self.mu = self.lam // 2
        w = np.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / (self.weights**2).sum()
        n, mueff = self.n, self.mueff
        self.c_sigma = (mueff + 2) / (n + mueff + 5)
        self.d_sigma = 1 + 2 * max(0.0, np.sqrt((mueff - 1) / (n + 1)) - 1) + self.c_sigma
        self.c_mu = min(1.0, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        self.chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))

        self.mean = np.asarray(x0, dtype=float).copy()
        self.sigma = float(sigma0)
        self.lower, self.upper = lower, upper
        self.cov = np.eye(n)
        self.p_sigma = np.zeros(n)
        self._decompose()

    def _decompose(self):
        w, V = np.linalg.eigh(self.cov)
        w = np.maximum(w, 1e-20)
        self._sqrt_c = (V * np.sqrt(w)) @ V.T
        self._inv_sqrt_c = (V / np.sqrt(w)) @ V.T

    def ask(self) -> np.ndarray:
        """Sample a (lam, n) population, repaired into the box bounds."""
        self._z = self.rng.standard_normal((self.lam, self.n))
        x = self.mean + self.sigma * (self._z @ self._sqrt_c.T)
        return np.clip(x, self.lower, self.upper)

    def tell(self, xs: np.ndarray, fs: np.ndarray):
        order = np.argsort(fs, kind="stable")[: self.mu]
        sel = xs[order]
        old_mean = self.mean
        self.mean = self.weights @ sel

        y = (sel - old_mean) / self.sigma  # (mu, n)
        delta = self._inv_sqrt_c @ (self.mean - old_mean) / self.sigma
        self.p_sigma = ((1 - self.c_sigma) * self.p_sigma
                        + np.sqrt(self.c_sigma * (2 - self.c_sigma) * self.mueff) * delta)
        self.sigma *= np.exp((self.c_sigma / self.d_sigma)
                             * (np.linalg.norm(self.p_sigma) / self.chi_n - 1))
        self.sigma = float(np.clip(self.sigma, 1e-8, 1e3))

        rank_mu = np.einsum("i,ij,ik->jk", self.weights, y, y)
        self.cov = (1 - self.c_mu) * self.cov + self.c_mu * rank_mu
        self.cov = 0.5 * (self.cov + self.cov.T)
        self._decompose()
