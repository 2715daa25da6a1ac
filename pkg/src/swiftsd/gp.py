"""Gaussian-process surrogate over layer masks embedded in [0, 1]^L."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import norm


class GPSurrogate:
    """RBF-kernel GP with expected-improvement acquisition.

    Scores are standardized before fitting; the kernel has unit amplitude on
    the standardized scale. Re-observing a mask overwrites its score.
    """

    def __init__(self, length_scale: float = 1.0, xi: float = 0.01, noise: float = 1e-6):
        self.length_scale = length_scale
        self.xi = xi
        self.noise = noise
        self._index: dict[tuple[int, ...], int] = {}
        self._x: list[np.ndarray] = []
        self._y: list[float] = []
        self._fit = None

    def __len__(self) -> int:
        return len(self._y)

    def __contains__(self, bits) -> bool:
        return tuple(int(b) for b in bits) in self._index

    @property
    def observations(self) -> list[tuple[tuple[int, ...], float]]:
        return [(k, self._y[i]) for k, i in self._index.items()]

    def observe(self, bits, score: float) -> None:
        key = tuple(int(b) for b in bits)
        if key in self._index:
            self._y[self._index[key]] = float(score)
        else:
            self._index[key] = len(self._y)
            self._x.append(np.array(key, dtype=np.float64))
            self._y.append(float(score))
        self._fit = None

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * self.length_scale**2))

    def fit(self):
        if self._fit is None:
            x = np.stack(self._x)
            y = np.array(self._y)
            mean, std = y.mean(), y.std()
            std = std if std > 0 else 1.0
            yn = (y - mean) / std
            k = self._kernel(x, x) + self.noise * np.eye(len(y))
            chol = cho_factor(k, lower=True)
            self._fit = (x, yn, chol, cho_solve(chol, yn), yn.max())
        return self._fit

    def predict(self, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation (standardized units)."""
        x, _, chol, alpha, _ = self.fit()
        ks = self._kernel(np.atleast_2d(xq), x)
        mu = ks @ alpha
        v = solve_triangular(chol[0], ks.T, lower=True)
        var = np.maximum(1.0 - (v * v).sum(0), 1e-12)
        return mu, np.sqrt(var)

    def expected_improvement(self, xq: np.ndarray) -> np.ndarray:
        _, _, _, _, best = self.fit()
        mu, sigma = self.predict(xq)
        imp = mu - best - self.xi
        z = imp / sigma
        return imp * norm.cdf(z) + sigma * norm.pdf(z)

    def ei_and_grad(self, xq: np.ndarray) -> tuple[float, np.ndarray]:
        """EI at a single point and its gradient."""
        x, _, chol, alpha, best = self.fit()
        xq = np.asarray(xq, dtype=np.float64)
        ks = self._kernel(xq[None, :], x)[0]
        dk = ks[:, None] * (x - xq[None, :]) / self.length_scale**2
        mu = ks @ alpha
        kinv_k = cho_solve(chol, ks)
        var = 1.0 - ks @ kinv_k
        if var <= 1e-12:
            return 0.0, np.zeros_like(xq)
        sigma = np.sqrt(var)
        dmu = alpha @ dk
        dsigma = -(kinv_k @ dk) / sigma
        imp = mu - best - self.xi
        z = imp / sigma
        cdf, pdf = norm.cdf(z), norm.pdf(z)
        return float(imp * cdf + sigma * pdf), cdf * dmu + pdf * dsigma
