"""Training runtime: the single-environment primal-dual PPO loop and its
multi-worker (chief + workers) counterpart.

Both share ``Learner.update``; a one-worker distributed run therefore
reproduces the single-environment run exactly.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from .channel import synthesize_channels
from .env import (
    ScenarioConfig, beampattern_mse, beampattern_mse_beams, effective_channel, env_step, initial_phase,
    power_projection, sum_rate_reward,
)
from .errors import ContractViolation
from .nn import Adam, save_npz, TruncGaussHead, gauss_params, gauss_params_backward
from .policy import (
    Actor, Critic, MetricsLog, PpoConfig, ReplayMemory, Transition, advantage_mc,
    channel_features, critic_update, epsilon_greedy_phase, l_step_advantage,
    ppo_actor_update, ppo_clip_loss,
)
from .primal_dual import (
    DualTrajectory, Estimates, PrimalDualState, primal_dual_step, zo_grad_f0, zo_grad_f2,
    zo_grad_policy,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    episodes: int = 500
    steps_per_episode: int = 50
    lr_actor: float = 1e-3
    lr_critic: float = 2e-3
    # records per worker between chief updates; None = one full episode
    horizon: int | None = None
    replay_capacity: int = 10_000
    replay_batch: int = 32
    critic_steps: int | None = None
    target_sync: int = 100
    actor_hidden: int = 30
    critic_hidden: int = 20
    std_min: float = 1e-3
    primal_dual: bool = True
    shape_reward: bool = True
    tau: tuple = (1e-3, 1e-3, 1e-3, 1e-3)
    alpha: tuple = (1e-3, 1e-3, 1e-3)
    lam0: float = 1.0
    mu0: float = 0.0
    x_variant: str = "printed"
    advantage: str = "lstep"
    policy_objective: str = "ppo"
    workers: int = 1
    quorum: int | None = None
    deterministic: bool = True
    push: str = "data"

    def __post_init__(self):
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ValueError("episodes and steps_per_episode must be >= 1")
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.quorum is not None and not 1 <= self.quorum <= self.workers:
            raise ValueError("quorum must lie in 1..workers")
        if self.horizon is not None and self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.push not in ("data", "gradient"):
            raise ValueError("push must be 'data' or 'gradient'")
        if self.advantage not in ("lstep", "mc"):
            raise ValueError("advantage must be 'lstep' or 'mc'")
        if self.policy_objective not in ("ppo", "a2c"):
            raise ValueError("policy_objective must be 'ppo' or 'a2c'")
        if self.x_variant not in ("printed", "lambda"):
            raise ValueError("x_variant must be 'printed' or 'lambda'")
        if self.scenario.R > 1 and self.workers > self.scenario.K:
            raise ValueError("MIMO runs use at most one worker per user")

    @property
    def turns_per_step(self) -> int:
        return self.scenario.streams

    @property
    def records_per_episode(self) -> int:
        return self.steps_per_episode * self.turns_per_step

    @property
    def effective_horizon(self) -> int:
        return self.records_per_episode if self.horizon is None else self.horizon


def params_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# vectorized policy evaluation for the zeroth-order estimates
# ---------------------------------------------------------------------------

def batch_rates(Hs: np.ndarray, Ws: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Per-column rates for a stack of (H, W) pairs, shapes (B, M, U)."""
    G = np.abs(np.einsum("bmu,bmv->buv", Hs.conj(), Ws)) ** 2
    sig = np.einsum("buu->bu", G)
    sinr = sig / (G.sum(axis=2) - sig + cfg.sigma_c2)
    return np.log1p(sinr) / math.log(cfg.log_base)


def project_batch(Ws: np.ndarray, cap: float) -> np.ndarray:
    rows = (np.abs(Ws) ** 2).sum(axis=2, keepdims=True)
    return Ws * np.sqrt(np.minimum(1.0, cap / np.maximum(rows, 1e-300)))


def policy_beams(actor: Actor, Hs: np.ndarray) -> np.ndarray:
    """Deterministic (mean-action) beams for every column of every H."""
    B, M, U = Hs.shape
    obs = channel_features(np.swapaxes(Hs, 1, 2).reshape(B * U, M))
    a = actor.mean_action(obs)
    return np.swapaxes(actor.beam(a).reshape(B, U, M), 1, 2)


# ---------------------------------------------------------------------------
# learner (global parameters and the shared update path)
# ---------------------------------------------------------------------------

class Learner:
    """Global actor/critic, optimizers, replay memory and primal-dual state."""

    def __init__(self, cfg: TrainConfig, seed: int):
        self.cfg = cfg
        sc = cfg.scenario
        init, upd, probe = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        bound = math.sqrt(sc.per_antenna_power)
        self.actor = Actor(sc.M, bound, init, cfg.actor_hidden, cfg.std_min)
        self.critic = Critic(sc.M, sc.N, sc.n_levels, init, cfg.critic_hidden, cfg.lr_critic,
                             cfg.target_sync)
        self.actor_opt = Adam(self.actor.net, cfg.lr_actor)
        self.replay = ReplayMemory(cfg.replay_capacity)
        self.pd = PrimalDualState.initial(self.actor.net.get_flat(), sc.streams, 1,
                                          cfg.lam0, cfg.mu0, tau=tuple(cfg.tau), alpha=tuple(cfg.alpha))
        self.rng_update, self.rng_probe = upd, probe
        self.generation = 0
        self.metrics = MetricsLog()
        self.dual = DualTrajectory()
        self._scratch = self.actor.clone()

    # -- parameters ---------------------------------------------------------
    def snapshot(self) -> dict:
        return {"actor": self.actor.net.get_flat(), "critic": self.critic.net.get_flat(),
                "mu": float(self.pd.mu[0]), "generation": self.generation}

    def digest(self) -> str:
        return params_digest(self.actor.net.get_flat(), self.critic.net.get_flat(),
                             self.pd.x, self.pd.lam, self.pd.mu)

    def save(self, path):
        save_npz(path, actor=self.actor.net, critic=self.critic.net)

    # -- advantages ---------------------------------------------------------
    def advantages(self, batch) -> np.ndarray:
        """Advantages per (worker, user, episode) trajectory, returned in batch order."""
        groups: dict = {}
        for i, r in enumerate(batch):
            groups.setdefault((r.worker, r.user, r.episode), []).append(i)
        out = np.empty(len(batch))
        p = self.cfg.ppo
        for idx in groups.values():
            recs = [batch[i] for i in idx]
            obs = np.array([r.obs for r in recs] + [recs[-1].next_obs])
            v = self.critic.value(obs)
            if recs[-1].done:
                v[-1] = 0.0
            rew = [r.reward for r in recs]
            if self.cfg.advantage == "lstep":
                A = l_step_advantage(rew, v, p.gamma, p.L, p.convention)
            else:
                A = advantage_mc(rew, v[:-1], p.gamma, p.convention)
            out[idx] = A
        return out

    # -- one chief update ---------------------------------------------------
    def update(self, batches, pool: ThreadPoolExecutor | None = None) -> dict:
        cfg = self.cfg
        pooled = [r for b in batches for r in b]
        if not pooled:
            self.generation += 1
            return {}
        for r in pooled:
            if r.generation != self.generation:
                raise ContractViolation(
                    f"record from generation {r.generation} offered to generation {self.generation}")
        adv = np.concatenate([self.advantages(b) for b in batches if len(b)])
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        if cfg.push == "gradient" and len(batches) > 1:
            stats = self._gradient_push(batches, adv, pool)
        elif cfg.policy_objective == "a2c":
            stats = self._a2c_step(pooled, adv)
        else:
            stats = ppo_actor_update(self.actor, self.actor_opt, pooled, adv, cfg.ppo, self.rng_update)

        for r in pooled:
            self.replay.add(r)
        closs = {"value_loss": float("nan"), "q_loss": float("nan")}
        if cfg.lr_critic > 0:
            n = cfg.critic_steps or max(1, len(pooled) // cfg.replay_batch)
            for _ in range(n):
                closs = critic_update(self.replay.sample(cfg.replay_batch, self.rng_update),
                                      self.critic, cfg.ppo.gamma)

        if cfg.primal_dual:
            self._primal_dual(pooled)

        self.metrics.add(update_idx=self.generation, value_loss=closs["value_loss"],
                         q_loss=closs["q_loss"], **stats)
        self.generation += 1
        return {**stats, **closs}

    def _policy_grads(self, actor: Actor, recs, adv) -> list:
        """Full-batch gradient of the negated clipped surrogate."""
        obs = np.array([r.obs for r in recs])
        act = np.array([r.action for r in recs])
        old = np.array([r.logp_old for r in recs])
        z = actor.net.forward(obs)
        mean, std = gauss_params(z, actor.bound, actor.std_min)
        head = TruncGaussHead(mean, std, -actor.bound, actor.bound)
        new = head.logprob_terms(act).sum(axis=-1)
        res = ppo_clip_loss(new, old, adv, self.cfg.ppo.clip_eps)
        dm, ds = head.grad_logprob(act)
        gl = res.grad_logp[:, None]
        return actor.net.backward(gauss_params_backward(z, actor.bound, -gl * dm, -gl * ds)), res

    def _gradient_push(self, batches, adv, pool) -> dict:
        """Workers' local gradients on their own batch, averaged by the chief."""
        splits = np.cumsum([len(b) for b in batches])[:-1]
        advs = np.split(adv, splits)
        res = None
        for _ in range(self.cfg.ppo.epochs_per_update):
            replicas = [self.actor.clone() for _ in batches]
            jobs = list(zip(replicas, batches, advs))
            if pool is None:
                out = [self._policy_grads(*j) for j in jobs if len(j[1])]
            else:
                out = list(pool.map(lambda j: self._policy_grads(*j), [j for j in jobs if len(j[1])]))
            grads = [sum(g[i] for g, _ in out) / len(out) for i in range(len(out[0][0]))]
            res = out[0][1]
            self.actor_opt.step(grads)
        return {"clip_loss": res.value if res else 0.0, "mean_ratio": res.mean_ratio if res else 1.0,
                "kl": 0.0, "rejected": 0}

    def _a2c_step(self, recs, adv) -> dict:
        """Single on-policy step on mean(logp * A) (no ratio, no clipping)."""
        if self.actor_opt.lr == 0:
            return {"clip_loss": 0.0, "mean_ratio": 1.0, "kl": 0.0, "rejected": 0}
        obs = np.array([r.obs for r in recs])
        act = np.array([r.action for r in recs])
        z = self.actor.net.forward(obs)
        mean, std = gauss_params(z, self.actor.bound, self.actor.std_min)
        head = TruncGaussHead(mean, std, -self.actor.bound, self.actor.bound)
        dm, ds = head.grad_logprob(act)
        w = (adv / len(recs))[:, None]
        self.actor_opt.step(self.actor.net.backward(
            gauss_params_backward(z, self.actor.bound, -w * dm, -w * ds)))
        return {"clip_loss": float(np.mean(adv)), "mean_ratio": 1.0, "kl": 0.0, "rejected": 0}

    # -- primal-dual --------------------------------------------------------
    def f1_of_omega(self, omega, Hs) -> np.ndarray:
        self._scratch.net.set_flat(omega)
        Ws = project_batch(policy_beams(self._scratch, Hs), self.cfg.scenario.per_antenna_power)
        return batch_rates(Hs, Ws, self.cfg.scenario).mean(axis=0)

    def _primal_dual(self, pooled):
        cfg, sc = self.cfg, self.cfg.scenario
        state = self.pd
        state.omega = self.actor.net.get_flat()
        a1, a2, a3 = state.alpha
        f0 = lambda x: float(np.sum(x))
        for r in pooled:
            sample = self.replay.sample(cfg.replay_batch, self.rng_probe)
            Hs = np.array([s.H for s in sample])
            f1 = lambda w: self.f1_of_omega(w, Hs)
            slack = sc.ell - r.L_r
            est = Estimates(
                grad_f0=zo_grad_f0(f0, state.x, a1, self.rng_probe),
                jac_f2=zo_grad_f2(lambda x: np.array([slack]), state.x, a2, self.rng_probe),
                jac_policy=zo_grad_policy(f1, state.omega, a3, self.rng_probe),
                Ef1=self.f1_of_omega(state.omega, Hs),
                f2=np.array([slack]),
            )
            state = primal_dual_step(state, est, cfg.x_variant)
        self.pd = state
        if state.tau[0] > 0:
            self.actor.net.set_flat(state.omega)


# ---------------------------------------------------------------------------
# workers
# ---------------------------------------------------------------------------

@dataclass
class EpisodeSummary:
    worker: int
    episode: int
    reward: float
    capacity: float
    L_r: float
    greedy_f0: float
    greedy_L_r: float
    ergodic_L_r: float
    W_greedy: np.ndarray
    phases: np.ndarray | None


class WorkerSlot:
    """One environment plus local replicas of the global networks.

    In MISO runs every worker owns a full K-user environment; in MIMO runs
    worker k sees user k's M x R channel view.
    """

    def __init__(self, worker_id: int, learner: Learner, seed: int):
        cfg = learner.cfg
        self.worker_id = worker_id
        self.cfg = cfg
        self.seed = seed
        self.actor = learner.actor.clone()
        self.critic_net = learner.critic.net.clone()
        self.rng = np.random.default_rng([seed, 1000 + worker_id])
        self.generation = -1
        self.mu = 0.0
        self.episode = -1
        self.t = 0
        self.k = 0
        self.completed: list[EpisodeSummary] = []
        self._ep_f0: list[float] = []
        self._ep_L: list[float] = []

    def sync(self, learner: Learner):
        self.actor.net.set_flat(learner.actor.net.get_flat())
        self.critic_net.set_flat(learner.critic.net.get_flat())
        self.mu = float(learner.pd.mu[0]) if self.cfg.shape_reward else 0.0
        self.generation = learner.generation

    def _new_episode(self):
        sc = self.cfg.scenario
        self.episode += 1
        mimo = sc.R > 1
        tag = 0 if mimo else self.worker_id
        ch_rng = np.random.default_rng([self.seed, 7, self.episode, tag])
        cs = synthesize_channels(sc.M, sc.K, sc.N, sc.R, sc.channel, ch_rng)
        self.cs = cs.for_user(self.worker_id) if mimo else cs
        self.pc = initial_phase(sc, ch_rng)
        self.H = effective_channel(self.cs, self.pc)
        self.W = policy_beams(self.actor, self.H[None])[0]
        self.t = self.k = 0
        self._ep_f0, self._ep_L = [], []
        self._R_sum = np.zeros((sc.M, sc.M), dtype=complex)

    def _finish_episode(self):
        sc = self.cfg.scenario
        R_bar = self._R_sum / self.cfg.steps_per_episode
        Wg = power_projection(policy_beams(self.actor, self.H[None])[0], sc).W
        _, gf0 = sum_rate_reward(self.H, Wg, sc)
        self.completed.append(EpisodeSummary(
            self.worker_id, self.episode, float(np.sum(self._ep_f0)), float(np.mean(self._ep_f0)),
            float(np.mean(self._ep_L)), gf0, beampattern_mse_beams(Wg, sc),
            beampattern_mse(0.5 * (R_bar + R_bar.conj().T), sc), Wg,
            None if self.pc.indices is None else self.pc.indices.copy()))

    def turn(self) -> Transition:
        """One actor/critic turn for the current user (stream)."""
        sc = self.cfg.scenario
        if self.episode < 0 or self.t >= self.cfg.steps_per_episode:
            self._new_episode()
        k = self.k
        obs = channel_features(self.H[:, k])
        a, logp = self.actor.act(obs, self.rng)
        self.W[:, k] = self.actor.beam(a)
        Wp = power_projection(self.W, sc).W
        q = self.critic_net.predict(obs)[1:].reshape(sc.N, sc.n_levels)
        idx = epsilon_greedy_phase(q, self.cfg.ppo.explore_prob, self.rng)
        step = env_step(self.cs, self.pc, Wp, idx, sc)
        done = self.t == self.cfg.steps_per_episode - 1 and k == self.cfg.turns_per_step - 1
        reward = step.reward + self.mu * (sc.ell - step.L_r)
        rec = Transition(obs, a, logp, idx, reward, channel_features(step.next_H[:, k]), done,
                         step.reward, step.L_r, step.rates, self.H.copy(), self.worker_id,
                         self.generation, k, self.episode)
        self.pc, self.H = step.next_phase, step.next_H
        self.k += 1
        if self.k == self.cfg.turns_per_step:
            self._ep_f0.append(step.reward)
            self._ep_L.append(step.L_r)
            self._R_sum += Wp @ Wp.conj().T
            self.k = 0
            self.t += 1
            if self.t == self.cfg.steps_per_episode:
                self._finish_episode()
        return rec


def worker_collect(slot: WorkerSlot, horizon: int, generation: int | None = None) -> list[Transition]:
    """Collect ``horizon`` transitions under the slot's current replicas.

    If ``generation`` is given and differs from the slot's synced generation
    the slot is out of date and nothing is collected.
    """
    if generation is not None and generation != slot.generation:
        log.warning("worker %d desynchronized (gen %d vs %d), batch discarded",
                    slot.worker_id, slot.generation, generation)
        return []
    return [slot.turn() for _ in range(horizon)]


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    episodes: list[dict]
    learner: Learner
    digests: list[str]
    final_W: np.ndarray | None = None
    final_phases: np.ndarray | None = None
    final_f0: float | None = None
    discarded: int = 0

    def column(self, name) -> np.ndarray:
        return np.array([e[name] for e in self.episodes], dtype=float)


def _episode_row(summaries: list[EpisodeSummary], learner: Learner, episode: int) -> dict:
    pd = learner.pd
    return {
        "episode": episode,
        "reward": float(np.mean([s.reward for s in summaries])),
        "capacity": float(np.mean([s.capacity for s in summaries])),
        "L_r": float(np.mean([s.L_r for s in summaries])),
        "greedy_f0": float(np.mean([s.greedy_f0 for s in summaries])),
        "greedy_L_r": float(np.mean([s.greedy_L_r for s in summaries])),
        "ergodic_L_r": float(np.mean([s.ergodic_L_r for s in summaries])),
        "mu": float(pd.mu[0]),
        "lam": float(pd.lam.mean()),
        "x": float(pd.x.mean()),
        "f2": float(learner.cfg.scenario.ell - np.mean([s.greedy_L_r for s in summaries])),
    }


def _finalize(log_: TrainingLog, slots):
    last = [s.completed[-1] for s in slots if s.completed]
    if last:
        log_.final_W = last[0].W_greedy
        log_.final_phases = last[0].phases
        log_.final_f0 = last[0].greedy_f0
    return log_


def run_training_miso(cfg: TrainConfig, seed: int, on_episode=None) -> TrainingLog:
    """Single-environment primal-dual PPO; one update per horizon of turns."""
    if cfg.workers != 1:
        raise ValueError("the single-environment loop uses exactly one worker")
    cfg.scenario.__post_init__()
    learner = Learner(cfg, seed)
    slot = WorkerSlot(0, learner, seed)
    out = TrainingLog([], learner, [])
    while len(slot.completed) < cfg.episodes:
        slot.sync(learner)
        before = len(slot.completed)
        batch = worker_collect(slot, cfg.effective_horizon)
        learner.update([batch])
        out.digests.append(learner.digest())
        for s in slot.completed[before:]:
            learner.dual.add(s.episode, learner.pd, cfg.scenario.ell - s.greedy_L_r)
            out.episodes.append(_episode_row([s], learner, s.episode))
            if on_episode:
                on_episode(out.episodes[-1])
        if cfg.effective_horizon == 0:
            break
    return _finalize(out, [slot])


def run_training_dppo(cfg: TrainConfig, seed: int, on_episode=None) -> TrainingLog:
    """Synchronous chief/worker training with a full barrier per generation.

    With a quorum below the worker count, only the first ``quorum`` batches
    (worker order in deterministic mode, completion order otherwise) are
    pooled; late batches are discarded and counted.
    """
    learner = Learner(cfg, seed)
    slots = [WorkerSlot(w, learner, seed) for w in range(cfg.workers)]
    quorum = cfg.quorum or cfg.workers
    out = TrainingLog([], learner, [])
    h = cfg.effective_horizon
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        while min(len(s.completed) for s in slots) < cfg.episodes:
            for s in slots:
                s.sync(learner)
            gen = learner.generation
            before = [len(s.completed) for s in slots]
            futures = {pool.submit(worker_collect, s, h, gen): s.worker_id for s in slots}
            if cfg.deterministic:
                results = {futures[f]: f.result() for f in futures}
                order = sorted(results)
            else:
                results, order = {}, []
                for f in as_completed(futures):
                    results[futures[f]] = f.result()
                    order.append(futures[f])
            accepted = order[:quorum]
            out.discarded += sum(len(results[w]) for w in order[quorum:])
            batches = [results[w] for w in sorted(accepted)]
            for b in batches:
                if any(r.generation != gen for r in b):
                    raise ContractViolation("worker collected under stale parameters")
            learner.update(batches, pool)
            out.digests.append(learner.digest())
            new = [s.completed[before[i]:] for i, s in enumerate(slots)]
            for j in range(min(len(n) for n in new)):
                summaries = [n[j] for n in new]
                ep = summaries[0].episode
                learner.dual.add(ep, learner.pd, cfg.scenario.ell - np.mean([s.greedy_L_r for s in summaries]))
                out.episodes.append(_episode_row(summaries, learner, ep))
                if on_episode:
                    on_episode(out.episodes[-1])
            if h == 0:
                break
    return _finalize(out, slots)
