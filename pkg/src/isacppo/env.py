"""IRS-aided ISAC environment: effective channel, SINR / sum-rate reward,
radar beam pattern and its MSE, discrete IRS phase control and the
per-antenna power budget.

Convention: an effective channel is stored as an M x U matrix whose column
``h_u`` satisfies ``y_u = h_u^H X``; U is the number of users (MISO) or the
number of receive antennas of one user (MIMO worker view).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .channel import ChannelConfig, ChannelSet, irs_amplitude, ula_manifold, upa_steering
from .errors import ContractViolation, InvalidActionError, InvalidDimensionError

DEG = math.pi / 180


@dataclass
class ScenarioConfig:
    M: int = 5
    K: int = 4
    N: int = 16
    R: int = 1
    b: int = 2
    P_max: float = 1.0
    sigma_c2: float = 0.1
    ell: float = 1.0
    target_angles: tuple[float, ...] = (-40 * DEG, 0.0, 40 * DEG)
    Delta: float = 10 * DEG
    grid_res: float = 0.1 * DEG
    log_base: float = 2.0
    # "max": divide P by its peak before the MSE, "raw": printed formula
    pattern_norm: str = "raw"
    gamma_min: float = 0.2
    phi_shift: float = 0.43 * math.pi
    eps_exp: float = 1.6
    radar_gain: complex = 1.0
    target_elevations: tuple[float, ...] | None = None
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def __post_init__(self):
        if min(self.M, self.K, self.N, self.R) < 1:
            raise ValueError("M, K, N, R must be >= 1")
        if self.b < 1:
            raise ValueError("phase resolution b must be >= 1")
        if not self.P_max > 0 or not self.sigma_c2 > 0 or not self.ell > 0:
            raise ValueError("P_max, sigma_c2 and ell must be positive")
        if any(not -math.pi / 2 < t < math.pi / 2 for t in self.target_angles):
            raise ValueError("target angles must lie in (-pi/2, pi/2)")
        if self.pattern_norm not in ("max", "raw"):
            raise ValueError(f"pattern_norm must be 'max' or 'raw', got {self.pattern_norm!r}")

    @property
    def n_levels(self) -> int:
        return 2 ** self.b

    @property
    def streams(self) -> int:
        """Columns of one environment's effective channel."""
        return self.K if self.R == 1 else self.R

    @property
    def per_antenna_power(self) -> float:
        return self.P_max / self.M

    def grid(self) -> np.ndarray:
        return _grid(self.grid_res)


@lru_cache(maxsize=8)
def _grid(res: float) -> np.ndarray:
    L = int(round(math.pi / res)) + 1
    g = np.linspace(-math.pi / 2, math.pi / 2, L)
    g.flags.writeable = False
    return g


@lru_cache(maxsize=16)
def _manifold(M: int, res: float, d_over_lambda: float) -> np.ndarray:
    A = ula_manifold(_grid(res), M, d_over_lambda)
    A.flags.writeable = False
    return A


@lru_cache(maxsize=16)
def _desired(res: float, targets: tuple, Delta: float) -> np.ndarray:
    d = desired_pattern(_grid(res), targets, Delta)
    d.flags.writeable = False
    return d


# ---------------------------------------------------------------------------
# IRS phases
# ---------------------------------------------------------------------------

@dataclass
class PhaseConfig:
    indices: np.ndarray | None
    betas: np.ndarray
    gammas: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.gammas * np.exp(1j * self.betas)

    @property
    def V(self) -> np.ndarray:
        return np.diag(self.v)


def phase_matrix(indices, cfg: ScenarioConfig) -> PhaseConfig:
    """Discrete indices -> phases beta = i 2pi / (2^b - 1), amplitudes, V."""
    idx = np.asarray(indices)
    if idx.shape != (cfg.N,):
        raise InvalidActionError(f"expected {cfg.N} phase indices, got shape {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        if not np.all(idx == np.round(idx)):
            raise InvalidActionError("phase indices must be integers")
        idx = idx.astype(int)
    if np.any(idx < 0) or np.any(idx >= cfg.n_levels):
        raise InvalidActionError(f"phase indices must lie in 0..{cfg.n_levels - 1}")
    betas = idx * (2 * math.pi) / (cfg.n_levels - 1)
    return PhaseConfig(idx.copy(), betas, _amplitudes(betas, cfg))


def phase_from_betas(betas, cfg: ScenarioConfig) -> PhaseConfig:
    """Continuous phase configuration (used for the random initial V)."""
    betas = np.asarray(betas, dtype=float)
    if betas.shape != (cfg.N,):
        raise InvalidDimensionError(f"expected {cfg.N} phases")
    return PhaseConfig(None, betas, _amplitudes(betas, cfg))


def initial_phase(cfg: ScenarioConfig, rng: np.random.Generator) -> PhaseConfig:
    return phase_from_betas(rng.uniform(-math.pi / 2, math.pi / 2, size=cfg.N), cfg)


def _amplitudes(betas, cfg):
    return np.asarray(irs_amplitude(betas, cfg.gamma_min, cfg.phi_shift, cfg.eps_exp), dtype=float)


# ---------------------------------------------------------------------------
# communication
# ---------------------------------------------------------------------------

def effective_channel(cs: ChannelSet, pc: PhaseConfig) -> np.ndarray:
    """Columns h_u = H0[:, u] + H1^H V^H H2[:, u], i.e. rows H0^H + H2^H V H1.

    MIMO channel sets (leading user axis) give an array of shape (K, M, R).
    """
    v = pc.v
    if cs.H1.shape[0] != v.shape[0] or cs.H2.shape[-2] != v.shape[0]:
        raise InvalidDimensionError("phase configuration does not match the IRS size")
    if cs.H0.shape[-2] != cs.H1.shape[1]:
        raise InvalidDimensionError("H0 and H1 disagree on the number of BS antennas")
    reflected = cs.H1.conj().T @ (v.conj()[:, None] * cs.H2) if cs.H2.ndim == 2 else \
        np.einsum("nm,n,knr->kmr", cs.H1.conj(), v.conj(), cs.H2)
    return cs.H0 + reflected


def user_sinr(H: np.ndarray, W: np.ndarray, k: int, sigma_c2: float) -> float:
    g = H[:, k].conj() @ W
    power = np.abs(g) ** 2
    interference = power.sum() - power[k]
    return float(power[k] / (interference + sigma_c2))


def sinr_all(H: np.ndarray, W: np.ndarray, sigma_c2: float) -> np.ndarray:
    G = np.abs(H.conj().T @ W) ** 2
    signal = np.diag(G)
    return signal / (G.sum(axis=1) - signal + sigma_c2)


def sum_rate_reward(H: np.ndarray, W: np.ndarray, cfg: ScenarioConfig) -> tuple[np.ndarray, float]:
    rates = np.log1p(sinr_all(H, W, cfg.sigma_c2)) / math.log(cfg.log_base)
    return rates, float(rates.sum())


# ---------------------------------------------------------------------------
# radar
# ---------------------------------------------------------------------------

def _check_hermitian(R):
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ContractViolation("covariance must be square")
    scale = max(1.0, float(np.abs(R).max()))
    if not np.allclose(R, R.conj().T, atol=1e-10 * scale, rtol=0):
        raise ContractViolation("covariance must be Hermitian")


def beam_pattern(R_cov: np.ndarray, grid=None, d_over_lambda: float = 0.5,
                 grid_res: float = 0.1 * DEG) -> np.ndarray:
    """P(psi) = a(psi)^H R a(psi) over the grid (default [-90, 90] deg at 0.1 deg)."""
    R_cov = np.asarray(R_cov)
    _check_hermitian(R_cov)
    M = R_cov.shape[0]
    A = _manifold(M, grid_res, d_over_lambda) if grid is None else ula_manifold(grid, M, d_over_lambda)
    return np.maximum(np.einsum("ml,mn,nl->l", A.conj(), R_cov, A).real, 0.0)


def pattern_from_beams(W: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Same as ``beam_pattern(W W^H)`` without forming R."""
    A = _manifold(W.shape[0], cfg.grid_res, cfg.channel.d_over_lambda)
    return (np.abs(A.conj().T @ W) ** 2).sum(axis=1)


def desired_pattern(psi, targets, Delta: float):
    """1 where |psi - psi_p| <= Delta/2 for some target, else 0 (inclusive edges)."""
    psi = np.asarray(psi, dtype=float)
    hit = np.zeros(psi.shape, dtype=bool)
    # tolerate grid round-off at the inclusive edges
    for t in targets:
        hit |= np.abs(psi - t) <= Delta / 2 + 1e-12
    return hit.astype(float)


def _mse(P: np.ndarray, cfg: ScenarioConfig) -> float:
    if cfg.pattern_norm == "max":
        peak = P.max()
        P = P / peak if peak > 0 else P
    d = _desired(cfg.grid_res, tuple(cfg.target_angles), cfg.Delta)
    return float(np.mean((d - P) ** 2))


def beampattern_mse(R_cov: np.ndarray, cfg: ScenarioConfig) -> float:
    return _mse(beam_pattern(R_cov, d_over_lambda=cfg.channel.d_over_lambda,
                             grid_res=cfg.grid_res), cfg)


def beampattern_mse_beams(W: np.ndarray, cfg: ScenarioConfig) -> float:
    return _mse(pattern_from_beams(W, cfg), cfg)


@dataclass
class TargetResponses:
    A: np.ndarray
    B: np.ndarray
    alphas: np.ndarray


def target_response(cfg: ScenarioConfig, alphas=None) -> TargetResponses:
    targets = np.asarray(cfg.target_angles, dtype=float)
    if alphas is None:
        alphas = np.full(len(targets), cfg.radar_gain, dtype=complex)
    alphas = np.asarray(alphas, dtype=complex)
    if alphas.shape != targets.shape:
        raise InvalidDimensionError("need one path gain per target")
    elev = np.zeros_like(targets) if cfg.target_elevations is None else np.asarray(cfg.target_elevations)
    dl = cfg.channel.d_over_lambda
    a = ula_manifold(targets, cfg.M, dl)
    A = (a * alphas) @ a.conj().T
    B = np.zeros((cfg.N, cfg.N), dtype=complex)
    for alpha, u, t in zip(alphas, elev, targets):
        v = upa_steering(u, t, cfg.N, dl)
        B += alpha * np.outer(v, v.conj())
    return TargetResponses(A, B, alphas)


def radar_receive(cs: ChannelSet, pc: PhaseConfig, tr: TargetResponses, X, noise=None) -> np.ndarray:
    """y_r = (H1^H V B V^H H1 + A) X + n_r."""
    V = pc.V
    G = cs.H1.conj().T @ V @ tr.B @ V.conj().T @ cs.H1 + tr.A
    y = G @ np.asarray(X)
    return y if noise is None else y + noise


# ---------------------------------------------------------------------------
# power budget
# ---------------------------------------------------------------------------

@dataclass
class BeamformerW:
    W: np.ndarray

    @property
    def R_cov(self) -> np.ndarray:
        return self.W @ self.W.conj().T


def power_projection(W: np.ndarray, cfg_or_cap) -> BeamformerW:
    """Scale any antenna row whose power exceeds P_max/M back onto the budget."""
    cap = cfg_or_cap.per_antenna_power if isinstance(cfg_or_cap, ScenarioConfig) else float(cfg_or_cap)
    W = np.array(W, dtype=complex, copy=True)
    row_power = (np.abs(W) ** 2).sum(axis=1)
    over = row_power > cap
    W[over] *= np.sqrt(cap / row_power[over])[:, None]
    return BeamformerW(W)


# ---------------------------------------------------------------------------
# one environment transition
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    reward: float
    rates: np.ndarray
    L_r: float
    next_phase: PhaseConfig
    next_H: np.ndarray


def env_step(cs: ChannelSet, pc: PhaseConfig, W: np.ndarray, phase_indices,
             cfg: ScenarioConfig) -> StepResult:
    """Reward under the current effective channel, then apply the new IRS phases."""
    H = effective_channel(cs, pc)
    rates, f0 = sum_rate_reward(H, W, cfg)
    L_r = beampattern_mse_beams(W, cfg)
    nxt = phase_matrix(phase_indices, cfg)
    return StepResult(f0, rates, L_r, nxt, effective_channel(cs, nxt))

