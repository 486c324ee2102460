"""Lagrangian primal-dual iterates with zeroth-order gradient estimates.

Notation: f0(x) is the utility of the ergodic variables x, f1 the vector of
per-user rates produced by the policy, f2 the radar slack ell - L_r.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .env import ScenarioConfig, beampattern_mse

log = logging.getLogger(__name__)

PROBE_BOUND = 2.0


@dataclass
class PrimalDualState:
    omega: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    tau: tuple[float, float, float, float] = (1e-3, 1e-3, 1e-3, 1e-3)
    alpha: tuple[float, float, float] = (1e-3, 1e-3, 1e-3)
    rejected: int = 0

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if np.any(self.lam < 0) or np.any(self.mu < 0):
            raise ValueError("multipliers must be non-negative")
        if any(t < 0 for t in self.tau) or any(a <= 0 for a in self.alpha):
            raise ValueError("step sizes must be >= 0 and probe scales > 0")

    @classmethod
    def initial(cls, omega, K: int, n_constraints: int = 1, lam0: float = 1.0, mu0: float = 0.0,
                x0: float = 0.0, **kw) -> "PrimalDualState":
        return cls(np.array(omega, dtype=float), np.full(K, x0), np.full(K, lam0),
                   np.full(n_constraints, mu0), **kw)

    def copy(self) -> "PrimalDualState":
        return replace(self, omega=self.omega.copy(), x=self.x.copy(),
                       lam=self.lam.copy(), mu=self.mu.copy())


@dataclass
class Estimates:
    grad_f0: np.ndarray        # (n,)
    jac_f2: np.ndarray         # (m, n)
    jac_policy: np.ndarray     # (K, P): d E[f1] / d omega
    Ef1: np.ndarray            # (K,)
    f2: np.ndarray             # (m,)


def radar_slack(R_cov, ell: float, cfg: ScenarioConfig) -> float:
    """ell - L_r(R); non-negative iff the beam-pattern constraint holds."""
    return float(ell - beampattern_mse(R_cov, cfg))


def lagrangian(state: PrimalDualState, f0_val: float, f1_vals, f2_val) -> float:
    """f0 + mu^T f2 + lambda^T (E[f1] - x)."""
    f2 = np.atleast_1d(np.asarray(f2_val, dtype=float))
    return float(f0_val + state.mu @ f2 + state.lam @ (np.asarray(f1_vals, float) - state.x))


def truncated_probe(shape, rng: np.random.Generator, bound: float = PROBE_BOUND) -> np.ndarray:
    """Standard normal draws truncated to [-bound, bound] (inverse-CDF)."""
    lo = ndtr(-bound)
    return ndtri(lo + rng.uniform(size=shape) * (1.0 - 2.0 * lo))


def zo_grad_f0(f0, x0, alpha1: float, rng=None, probe=None) -> np.ndarray:
    """((f0(x0 + a p) - f0(x0)) / a) p for a truncated-normal probe p."""
    x0 = np.asarray(x0, dtype=float)
    p = truncated_probe(x0.shape, rng) if probe is None else np.asarray(probe, float)
    return (f0(x0 + alpha1 * p) - f0(x0)) / alpha1 * p


def zo_grad_f2(f2, x0, alpha2: float, rng=None, probe=None) -> np.ndarray:
    """Jacobian estimate ((f2(x0 + a p) - f2(x0)) / a) p^T, shape (m, n)."""
    x0 = np.asarray(x0, dtype=float)
    p = truncated_probe(x0.shape, rng) if probe is None else np.asarray(probe, float)
    diff = np.atleast_1d(np.asarray(f2(x0 + alpha2 * p), float) - np.asarray(f2(x0), float))
    return np.outer(diff / alpha2, p)


def zo_grad_policy(f1_of_omega, omega0, alpha3: float, rng=None, probe=None) -> np.ndarray:
    """Jacobian estimate of E[f1] w.r.t. the policy parameters, shape (K, P).

    ``f1_of_omega(omega)`` must return the batch-averaged rate vector of the
    policy with parameters ``omega``.
    """
    omega0 = np.asarray(omega0, dtype=float)
    p = truncated_probe(omega0.shape, rng) if probe is None else np.asarray(probe, float)
    diff = np.asarray(f1_of_omega(omega0 + alpha3 * p), float) - np.asarray(f1_of_omega(omega0), float)
    return np.outer(np.atleast_1d(diff) / alpha3, p)


def primal_dual_step(state: PrimalDualState, est: Estimates, x_variant: str = "printed") -> PrimalDualState:
    """One sequential pass over (omega, x, lambda, mu).

    ``x_variant`` selects the trailing term of the x update: "printed" uses
    -1 componentwise, "lambda" uses -lambda.  Non-finite estimates leave the
    state unchanged and bump ``rejected``.
    """
    parts = (est.grad_f0, est.jac_f2, est.jac_policy, est.Ef1, est.f2)
    if not all(np.all(np.isfinite(np.asarray(a, float))) for a in parts):
        log.warning("primal_dual_step: non-finite estimate, step rejected")
        out = state.copy()
        out.rejected += 1
        return out
    t1, t2, t3, t4 = state.tau
    jac_f2 = np.atleast_2d(est.jac_f2)
    f2 = np.atleast_1d(np.asarray(est.f2, float))
    omega = state.omega + t1 * (np.asarray(est.jac_policy).T @ state.lam)
    pull = 1.0 if x_variant == "printed" else state.lam
    x = state.x + t2 * (est.grad_f0 + jac_f2.T @ state.mu - pull)
    lam = np.maximum(state.lam - t3 * (est.Ef1 - x), 0.0)
    mu = np.maximum(state.mu - t4 * f2, 0.0)
    return replace(state, omega=omega, x=x, lam=lam, mu=mu)


@dataclass
class DualTrajectory:
    """Per-episode dump: episode, x_k..., lambda_k..., mu, f2."""

    rows: list = field(default_factory=list)

    def add(self, episode: int, state: PrimalDualState, f2: float):
        self.rows.append((episode, state.x.copy(), state.lam.copy(), float(state.mu[0]), float(f2)))

    def write(self, path):
        K = len(self.rows[0][1]) if self.rows else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode"] + [f"x_{k}" for k in range(K)]
                       + [f"lambda_{k}" for k in range(K)] + ["mu", "f2"])
            for ep, x, lam, mu, f2 in self.rows:
                w.writerow([ep] + [repr(float(v)) for v in x] + [repr(float(v)) for v in lam]
                           + [repr(mu), repr(f2)])
