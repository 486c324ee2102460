"""THz propagation and channel synthesis.

Steering vectors, LoS/NLoS large-scale gains with molecular absorption,
Fresnel/Rayleigh reflection loss, Rician channel assembly and the practical
IRS amplitude model.  Everything here is a pure function of its inputs plus
an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    InvalidDimensionError,
    PathlossSingularityError,
    TotalInternalReflectionError,
)

C_LIGHT = 3e8
Z_FREE = 377.0


@dataclass(frozen=True)
class PropagationParams:
    f: float = 0.55e12
    l: float = 10.0
    k_abs: float = 6.7141e-4
    c: float = C_LIGHT
    G_t: float = 1.0
    G_r: float = 1.0
    d_over_lambda: float = 0.5
    Z: float = 267.0
    Z0: float = Z_FREE
    sigma_rough: float = 5e-5
    phi_in: float = math.pi / 4
    n_NL: int = 4
    rician_K: float = 10.0

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"carrier frequency must be positive, got {self.f}")
        if self.l < 0:
            raise ValueError(f"distance must be non-negative, got {self.l}")
        if self.k_abs < 0:
            raise ValueError("absorption coefficient must be >= 0")
        if not 0 <= self.phi_in < math.pi / 2:
            raise ValueError("incidence angle must lie in [0, pi/2)")
        if self.n_NL < 0 or self.rician_K < 0:
            raise ValueError("n_NL and rician_K must be >= 0")


# ---------------------------------------------------------------------------
# array responses
# ---------------------------------------------------------------------------

def ula_steering(theta: float, M: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """Unit-norm ULA response, entry m = exp(-j 2pi d/lambda m cos(theta)) / sqrt(M)."""
    if M < 1:
        raise InvalidDimensionError(f"ULA needs at least one element, got M={M}")
    m = np.arange(M)
    return np.exp(-2j * np.pi * d_over_lambda * m * np.cos(theta)) / np.sqrt(M)


def ula_manifold(thetas, M: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """Stack of ULA responses, shape (M, len(thetas))."""
    if M < 1:
        raise InvalidDimensionError(f"ULA needs at least one element, got M={M}")
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    m = np.arange(M)[:, None]
    return np.exp(-2j * np.pi * d_over_lambda * m * np.cos(thetas)[None, :]) / np.sqrt(M)


def upa_steering(phi: float, theta: float, N: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """UPA response on a sqrt(N) x sqrt(N) grid, flattened row-major.

    Row index p multiplies cos(phi)cos(theta), column index q multiplies
    sin(phi)sin(theta).  The 1/N scaling is kept as printed in the model, so
    the returned vector has norm 1/sqrt(N).
    """
    side = math.isqrt(N) if N >= 1 else 0
    if N < 1 or side * side != N:
        raise InvalidDimensionError(f"IRS element count must be a perfect square, got N={N}")
    idx = np.arange(side)
    p, q = np.meshgrid(idx, idx, indexing="ij")
    phase = 2 * np.pi * d_over_lambda * (
        p * np.cos(phi) * np.cos(theta) + q * np.sin(phi) * np.sin(theta)
    )
    return (np.exp(1j * phase) / N).reshape(-1)


# ---------------------------------------------------------------------------
# large-scale gains
# ---------------------------------------------------------------------------

def _spread(p: PropagationParams) -> float:
    if p.l == 0:
        raise PathlossSingularityError("pathloss is undefined at zero distance")
    return (p.c / (4 * math.pi * p.f * p.l)) ** 2


def pathloss_los(p: PropagationParams) -> tuple[float, float]:
    """Return ``(L_spread, alpha_los)`` with alpha_los = L_spread * exp(-k_abs l)."""
    L_spread = _spread(p)
    return L_spread, L_spread * math.exp(-p.k_abs * p.l)


def reflection_coefficient(p: PropagationParams) -> complex:
    """Fresnel coefficient times Rayleigh roughness factor."""
    if not p.Z > 0:
        raise ValueError("wave impedance must be positive")
    s = p.Z / p.Z0 * math.sin(p.phi_in)
    if abs(s) > 1:
        raise TotalInternalReflectionError(
            f"|Z/Z0 sin(phi_in)| = {abs(s):.4g} > 1, refraction angle undefined"
        )
    phi_ref = math.asin(s)
    num = p.Z * math.cos(p.phi_in) - p.Z0 * math.cos(phi_ref)
    den = p.Z * math.cos(p.phi_in) + p.Z0 * math.cos(phi_ref)
    fresnel = num / den
    roughness = math.exp(-0.5 * (4 * math.pi * p.f * p.sigma_rough * math.cos(p.phi_in) / p.c) ** 2)
    return complex(fresnel * roughness)


def rayleigh_roughness(p: PropagationParams) -> float:
    return math.exp(-0.5 * (4 * math.pi * p.f * p.sigma_rough * math.cos(p.phi_in) / p.c) ** 2)


def pathloss_nlos(p: PropagationParams, Gamma: complex) -> float:
    _, alpha = pathloss_los(p)
    return abs(Gamma) ** 2 * alpha


def irs_amplitude(beta, gamma_min: float = 0.2, phi_shift: float = 0.43 * np.pi,
                  eps_exp: float = 1.6):
    """Practical phase-dependent IRS amplitude, in [gamma_min, 1].

    Defaults are the circuit constants commonly used with this model.
    """
    if not 0 <= gamma_min <= 1:
        raise ValueError("gamma_min must lie in [0, 1]")
    if eps_exp < 0:
        raise ValueError("eps_exp must be >= 0")
    base = (np.sin(np.asarray(beta) - phi_shift) + 1) / 2
    # sin can round a hair outside [-1, 1]
    base = np.clip(base, 0.0, 1.0)
    return (1 - gamma_min) * base ** eps_exp + gamma_min


# ---------------------------------------------------------------------------
# Rician assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    gain: complex
    rx: np.ndarray
    tx: np.ndarray


def draw_nlos_rays(p: PropagationParams, rx_fn, tx_fn, rng: np.random.Generator) -> list[Ray]:
    """Draw ``p.n_NL`` scattered rays.

    ``rx_fn``/``tx_fn`` map a random angle pair to a steering vector.  Each
    ray gets its own incidence angle for the reflection loss and a uniform
    phase.
    """
    rays = []
    for _ in range(p.n_NL):
        aoa = rng.uniform(-np.pi / 2, np.pi / 2, size=2)
        aod = rng.uniform(-np.pi / 2, np.pi / 2, size=2)
        phi_in = rng.uniform(0.0, np.pi / 2 * 0.999)
        phase = rng.uniform(0.0, 2 * np.pi)
        Gamma = reflection_coefficient(replace(p, phi_in=phi_in))
        gain = pathloss_nlos(p, Gamma) * np.exp(1j * phase)
        rays.append(Ray(complex(gain), rx_fn(*aoa), tx_fn(*aod)))
    return rays


def rician_channel(p: PropagationParams, rx_steer, tx_steer, nlos: Sequence[Ray] = ()) -> np.ndarray:
    """H = sqrt(K/(1+K)) H_LOS + sqrt(1/(1+K)) H_NLOS, shape (rx dim, tx dim)."""
    rx_steer = np.atleast_1d(np.asarray(rx_steer, dtype=complex))
    tx_steer = np.atleast_1d(np.asarray(tx_steer, dtype=complex))
    _, alpha_los = pathloss_los(p)
    H_los = alpha_los * p.G_t * p.G_r * np.outer(rx_steer, tx_steer.conj())
    H_nlos = np.zeros_like(H_los)
    for ray in nlos:
        if ray.rx.shape != rx_steer.shape or ray.tx.shape != tx_steer.shape:
            raise InvalidDimensionError("NLoS ray steering vectors do not match the LoS dimensions")
        H_nlos += ray.gain * p.G_t * p.G_r * np.outer(ray.rx, ray.tx.conj())
    K = p.rician_K
    return math.sqrt(K / (1 + K)) * H_los + math.sqrt(1 / (1 + K)) * H_nlos


# ---------------------------------------------------------------------------
# full channel sets
# ---------------------------------------------------------------------------

@dataclass
class ChannelConfig:
    """Synthesis knobs for one BS / IRS / user deployment."""

    f: float = 0.55e12
    k_abs: float = 6.7141e-4
    G_t: float = 1.0
    G_r: float = 1.0
    d_over_lambda: float = 0.5
    Z: float = 267.0
    sigma_rough: float = 5e-5
    n_NL: int = 4
    rician_K: float = 10.0
    dist_bs_user: float = 20.0
    dist_bs_irs: float = 10.0
    dist_irs_user: float = 10.0
    # users sit at the radar target azimuths, jittered per episode
    user_angles: tuple[float, ...] = tuple(np.deg2rad([-40.0, 0.0, 40.0]))
    user_jitter: float = np.deg2rad(2.0)
    normalize: bool = True
    irs_gain: float = 0.25
    irs_enabled: bool = True

    def params(self, l: float) -> PropagationParams:
        return PropagationParams(
            f=self.f, l=l, k_abs=self.k_abs, G_t=self.G_t, G_r=self.G_r,
            d_over_lambda=self.d_over_lambda, Z=self.Z, sigma_rough=self.sigma_rough,
            n_NL=self.n_NL, rician_K=self.rician_K,
        )


@dataclass
class ChannelSet:
    """Direct (M x U), BS->IRS (N x M) and IRS->user (N x U) gains.

    For MIMO scenarios H0 and H2 carry a leading user axis: (K, M, R) and
    (K, N, R); ``for_user`` slices out one user's MISO-shaped view.
    """

    H0: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    geometry: dict = field(default_factory=dict)

    @property
    def is_mimo(self) -> bool:
        return self.H0.ndim == 3

    def for_user(self, k: int) -> "ChannelSet":
        if not self.is_mimo:
            raise InvalidDimensionError("for_user only applies to MIMO channel sets")
        return ChannelSet(self.H0[k], self.H1, self.H2[k], {"user": k, **self.geometry})

    def check(self, M: int, N: int, U: int):
        H0, H2 = (self.H0, self.H2)
        if H0.shape[-2:] != (M, U) or self.H1.shape != (N, M) or H2.shape[-2:] != (N, U):
            raise InvalidDimensionError(
                f"channel shapes {H0.shape}, {self.H1.shape}, {H2.shape} inconsistent with M={M}, N={N}, U={U}"
            )
        for H in (H0, self.H1, H2):
            if not np.all(np.isfinite(H)):
                raise ValueError("channel contains non-finite entries")


def _rms(H: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.abs(H) ** 2)))


def _user_link(p, cfg, rng, M, R, aod):
    """Channel seen by one user, returned as the M x R column block (conjugate-transposed)."""
    rx = (lambda a, b: np.ones(1, complex)) if R == 1 else (
        lambda a, b: ula_manifold(a, R, cfg.d_over_lambda)[:, 0])
    tx = lambda a, b: ula_steering(a, M, cfg.d_over_lambda)
    aoa = rng.uniform(-np.pi / 2, np.pi / 2)
    rays = draw_nlos_rays(p, rx, tx, rng)
    H = rician_channel(p, rx(aoa, 0.0), tx(aod, 0.0), rays)
    return H.conj().T


def _irs_user_link(p, cfg, rng, N, R):
    rx = (lambda a, b: np.ones(1, complex)) if R == 1 else (
        lambda a, b: ula_manifold(a, R, cfg.d_over_lambda)[:, 0])
    tx = lambda a, b: upa_steering(a, b, N, cfg.d_over_lambda)
    aoa = rng.uniform(-np.pi / 2, np.pi / 2)
    dep = rng.uniform(-np.pi / 2, np.pi / 2, size=2)
    rays = draw_nlos_rays(p, rx, tx, rng)
    H = rician_channel(p, rx(aoa, 0.0), tx(*dep), rays)
    return H.conj().T


def synthesize_channels(M: int, K: int, N: int, R: int, cfg: ChannelConfig,
                        rng: np.random.Generator) -> ChannelSet:
    """Draw one channel realization.

    Three child streams are spawned from ``rng`` so the direct link does not
    depend on N (needed for element-count sweeps on identical seeds).

    With ``cfg.normalize`` each link is rescaled to unit mean entry power and
    the IRS->user link is further scaled by ``cfg.irs_gain``; raw mode keeps
    the physical THz gains.
    """
    if min(M, K, N, R) < 1:
        raise InvalidDimensionError("M, K, N, R must all be >= 1")
    g0, g1, g2 = rng.spawn(3)
    targets = np.asarray(cfg.user_angles, dtype=float)
    aods = np.array([targets[k % len(targets)] for k in range(K)])
    aods = aods + g0.uniform(-cfg.user_jitter, cfg.user_jitter, size=K)

    p0 = cfg.params(cfg.dist_bs_user)
    blocks0 = [_user_link(p0, cfg, g0, M, R, aods[k]) for k in range(K)]

    p1 = cfg.params(cfg.dist_bs_irs)
    bi_aod = g1.uniform(-np.pi / 2, np.pi / 2)
    bi_aoa = g1.uniform(-np.pi / 2, np.pi / 2, size=2)
    rays = draw_nlos_rays(p1, lambda a, b: upa_steering(a, b, N, cfg.d_over_lambda),
                          lambda a, b: ula_steering(a, M, cfg.d_over_lambda), g1)
    H1 = rician_channel(p1, upa_steering(*bi_aoa, N, cfg.d_over_lambda),
                        ula_steering(bi_aod, M, cfg.d_over_lambda), rays)

    p2 = cfg.params(cfg.dist_irs_user)
    blocks2 = [_irs_user_link(p2, cfg, g2, N, R) for k in range(K)]

    if R == 1:
        H0 = np.concatenate(blocks0, axis=1)
        H2 = np.concatenate(blocks2, axis=1)
    else:
        H0 = np.stack(blocks0)
        H2 = np.stack(blocks2)

    if cfg.normalize:
        H0 = H0 / _rms(H0)
        H1 = H1 / _rms(H1)
        H2 = H2 * (cfg.irs_gain / _rms(H2))
    if not cfg.irs_enabled:
        H2 = np.zeros_like(H2)
    geometry = {"user_aod": aods, "bs_irs_aod": bi_aod, "bs_irs_aoa": bi_aoa}
    return ChannelSet(H0, H1, H2, geometry)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def channels_to_csv(cs: ChannelSet) -> str:
    """One row per matrix entry: matrix,row,col,re,im (MIMO rows use 'H0[k]')."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["matrix", "row", "col", "re", "im"])

    def dump(name, H):
        for (r, c), v in np.ndenumerate(H):
            w.writerow([name, r, c, repr(float(v.real)), repr(float(v.imag))])

    for name in ("H0", "H1", "H2"):
        H = getattr(cs, name)
        if H.ndim == 3:
            for k in range(H.shape[0]):
                dump(f"{name}[{k}]", H[k])
        else:
            dump(name, H)
    return buf.getvalue()


def channels_from_csv(text: str) -> ChannelSet:
    entries: dict[str, dict[tuple[int, int], complex]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        entries.setdefault(row["matrix"], {})[(int(row["row"]), int(row["col"]))] = complex(
            float(row["re"]), float(row["im"]))

    def build(cells):
        rows = 1 + max(r for r, _ in cells)
        cols = 1 + max(c for _, c in cells)
        H = np.zeros((rows, cols), dtype=complex)
        for (r, c), v in cells.items():
            H[r, c] = v
        return H

    out = {}
    for name in ("H0", "H1", "H2"):
        if name in entries:
            out[name] = build(entries[name])
        else:
            ks = sorted(int(key[len(name) + 1:-1]) for key in entries if key.startswith(name + "["))
            out[name] = np.stack([build(entries[f"{name}[{k}]"]) for k in ks])
    return ChannelSet(out["H0"], out["H1"], out["H2"])
