"""Comparison methods: zero-forcing, maximum-ratio transmission, WMMSE and
asynchronous advantage actor-critic.
"""
from __future__ import annotations

import logging
import math
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dppo import EpisodeSummary, Learner, TrainConfig, TrainingLog, WorkerSlot, _episode_row
from .env import BeamformerW, power_projection, sinr_all
from .nn import TruncGaussHead, gauss_params, gauss_params_backward
from .policy import critic_grads

log = logging.getLogger(__name__)


def _fit_budget(W: np.ndarray, P_max: float) -> BeamformerW:
    """Equal power P_max/K per column, then one common scale so no antenna exceeds P_max/M."""
    M, K = W.shape
    norms = np.linalg.norm(W, axis=0)
    W = np.where(norms > 0, W / np.where(norms > 0, norms, 1.0), 0.0) * math.sqrt(P_max / K)
    rows = (np.abs(W) ** 2).sum(axis=1).max()
    cap = P_max / M
    if rows > cap:
        W = W * math.sqrt(cap / rows)
    return BeamformerW(W)


def zf_beamforming(H: np.ndarray, P_max: float) -> BeamformerW:
    """W = H (H^H H)^{-1}; a common scale keeps the nulls intact."""
    H = np.asarray(H, dtype=complex)
    G = H.conj().T @ H
    if np.linalg.matrix_rank(G) < H.shape[1]:
        warnings.warn("rank-deficient channel, falling back to the pseudo-inverse", RuntimeWarning)
        W = np.linalg.pinv(H.conj().T)
    else:
        W = H @ np.linalg.inv(G)
    return _fit_budget(W, P_max)


def mrt_beamforming(H: np.ndarray, P_max: float) -> BeamformerW:
    """Matched filter W_k ∝ h_k / ||h_k||."""
    H = np.asarray(H, dtype=complex)
    if np.any(np.linalg.norm(H, axis=0) == 0):
        warnings.warn("zero channel column, that user gets a zero beam", RuntimeWarning)
    return _fit_budget(H.copy(), P_max)


# ---------------------------------------------------------------------------
# WMMSE
# ---------------------------------------------------------------------------

@dataclass
class WmmseState:
    varsigma: np.ndarray
    vartheta: np.ndarray
    W: np.ndarray
    iteration: int = 0


@dataclass
class WmmseResult:
    W: np.ndarray
    trace: list[float]
    state: WmmseState
    W_raw: np.ndarray = field(repr=False, default=None)


def mmse_receivers(H, W, sigma2):
    """Complex MMSE scalars u_k = h_k^H w_k / (sum_l |h_k^H w_l|^2 + sigma2)."""
    G = H.conj().T @ W
    return np.diag(G) / ((np.abs(G) ** 2).sum(axis=1) + sigma2)


def mse_terms(H, W, u, sigma2):
    """e_k = |u_k* h_k^H w_k - 1|^2 + sum_{l != k} |u_k* h_k^H w_l|^2 + sigma2 |u_k|^2."""
    G = u.conj()[:, None] * (H.conj().T @ W)
    d = np.diag(G)
    return np.abs(d - 1) ** 2 + (np.abs(G) ** 2).sum(axis=1) - np.abs(d) ** 2 + sigma2 * np.abs(u) ** 2


def _solve_user(A, b, budget):
    """argmin w^H A w - 2 Re(b^H w) s.t. ||w||^2 <= budget, A Hermitian PSD."""
    lam, U = np.linalg.eigh(A)
    lam = np.maximum(lam, 0.0)
    c = U.conj().T @ b
    tiny = 1e-12 * max(lam.max(), 1.0)

    def power(nu):
        return float(np.sum(np.abs(c) ** 2 / (lam + nu) ** 2))

    if lam.min() > tiny and power(0.0) <= budget:
        return U @ (c / lam)
    lo, hi = 0.0, max(np.linalg.norm(b) / math.sqrt(budget), tiny)
    while power(hi) > budget:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if power(mid) > budget:
            lo = mid
        else:
            hi = mid
    return U @ (c / (lam + hi))


def _sum_rate(H, W, sigma2, log_base):
    return float(np.sum(np.log1p(sinr_all(H, W, sigma2))) / math.log(log_base))


def wmmse(H: np.ndarray, P_max: float, sigma2: float, iters: int = 50, W0=None,
          user_budget: float | None = None, log_base: float = 2.0) -> WmmseResult:
    """Block-coordinate WMMSE with a per-user power box ||w_k||^2 <= P_max.

    ``trace`` holds the sum rate of every iterate (starting with W0); the
    returned ``W`` is additionally projected onto the per-antenna budget.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    H = np.asarray(H, dtype=complex)
    M, K = H.shape
    budget = P_max if user_budget is None else user_budget
    if W0 is None:
        norms = np.linalg.norm(H, axis=0)
        W = H / np.where(norms > 0, norms, 1.0) * math.sqrt(budget)
    else:
        W = np.array(W0, dtype=complex)
    trace = [_sum_rate(H, W, sigma2, log_base)]
    u = mmse_receivers(H, W, sigma2)
    e = mse_terms(H, W, u, sigma2)
    for it in range(iters):
        u = mmse_receivers(H, W, sigma2)
        e = mse_terms(H, W, u, sigma2)
        s = 1.0 / e
        A = (H * (s * np.abs(u) ** 2)) @ H.conj().T
        W = np.column_stack([_solve_user(A, s[k] * u[k] * H[:, k], budget) for k in range(K)])
        trace.append(_sum_rate(H, W, sigma2, log_base))
        if trace[-1] < trace[-2] - 1e-6:
            log.warning("wmmse: sum rate dropped by %.3g at iteration %d", trace[-2] - trace[-1], it)
    state = WmmseState(1.0 / e, u, W, iters)
    return WmmseResult(power_projection(W, P_max / M).W, trace, state, W)


# ---------------------------------------------------------------------------
# A3C
# ---------------------------------------------------------------------------

def a3c_update(grads, params, lr: float, lock: threading.Lock | None = None):
    """Apply a worker's ascent direction to the shared parameter list in place."""
    with lock or _NULL_LOCK:
        for p, g in zip(params, grads, strict=True):
            if p.shape != g.shape:
                raise ValueError("gradient shape mismatch")
            p += lr * g
    return params


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL_LOCK = _NullLock()


def actor_critic_grads(actor, critic_net, target_net, records, cfg: TrainConfig):
    """Ascent directions: grad log pi (r - v) for the actor, -grad of the critic losses."""
    sc = cfg.scenario
    obs = np.array([r.obs for r in records])
    act = np.array([r.action for r in records])
    rew = np.array([r.reward for r in records])
    adv = rew - critic_net.predict(obs)[:, 0]
    z = actor.net.forward(obs)
    mean, std = gauss_params(z, actor.bound, actor.std_min)
    head = TruncGaussHead(mean, std, -actor.bound, actor.bound)
    dm, ds = head.grad_logprob(act)
    w = (adv / len(records))[:, None]
    g_actor = actor.net.backward(gauss_params_backward(z, actor.bound, w * dm, w * ds))
    g_critic, losses = critic_grads(records, critic_net, target_net, sc.N, sc.n_levels, cfg.ppo.gamma)
    return g_actor, [-g for g in g_critic], losses


def run_a3c(cfg: TrainConfig, seed: int, on_episode=None) -> TrainingLog:
    """Asynchronous actor-critic: each worker thread collects a horizon, computes
    gradients against its snapshot and applies them to the shared networks
    under a lock (no barrier, no replay).
    """
    learner = Learner(cfg, seed)
    lock = threading.Lock()
    n_workers = cfg.workers
    slots = [WorkerSlot(w, learner, seed) for w in range(n_workers)]
    out = TrainingLog([], learner, [])
    h = cfg.effective_horizon or cfg.records_per_episode

    def worker(slot: WorkerSlot):
        local_actor = slot.actor
        while len(slot.completed) < cfg.episodes:
            with lock:
                slot.sync(learner)
                target = learner.critic.target.clone()
            batch = [slot.turn() for _ in range(h)]
            ga, gc, _ = actor_critic_grads(local_actor, slot.critic_net, target, batch, cfg)
            with lock:
                a3c_update(ga, learner.actor.net.params(), cfg.lr_actor)
                a3c_update(gc, learner.critic.net.params(), cfg.lr_critic)
                learner.actor.net.touch()
                learner.critic.net.touch()
                learner.critic.updates += 1
                if learner.critic.updates % learner.critic.sync_every == 0:
                    learner.critic.target = learner.critic.net.clone()
                learner.generation += 1

    threads = [threading.Thread(target=worker, args=(s,)) for s in slots]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for j in range(min(len(s.completed) for s in slots)):
        summaries: list[EpisodeSummary] = [s.completed[j] for s in slots]
        out.episodes.append(_episode_row(summaries, learner, summaries[0].episode))
        if on_episode:
            on_episode(out.episodes[-1])
    last = slots[0].completed[-1]
    out.final_W, out.final_phases, out.final_f0 = last.W_greedy, last.phases, last.greedy_f0
    return out
