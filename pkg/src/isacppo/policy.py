"""PPO objectives, advantage estimators, the two-headed critic
(state value + per-element phase Q-values) and epsilon-greedy phase choice.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, DenseNet, TruncGaussHead, gauss_params, gauss_params_backward

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    gamma: float = 0.9
    # probability of the greedy phase choice; literal mode reads it as the random-choice probability
    epsilon: float = 0.95
    epsilon_literal: bool = False
    batch_size: int = 32
    epochs_per_update: int = 4
    mode: str = "clip"
    # L-step advantage window and reward-index convention ("printed" or "corrected")
    L: int = 1
    convention: str = "printed"
    literal_values: bool = False

    def __post_init__(self):
        if self.literal_values:
            self.clip_eps = 2.0
            self.epsilon_literal = True
        elif not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1); set literal_values to allow clip_eps = 2")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.mode not in ("clip", "klpen"):
            raise ValueError(f"mode must be 'clip' or 'klpen', got {self.mode!r}")
        if self.convention not in ("printed", "corrected"):
            raise ValueError("convention must be 'printed' or 'corrected'")
        if self.L < 1 or self.batch_size < 1 or self.epochs_per_update < 0:
            raise ValueError("L and batch_size must be >= 1, epochs >= 0")

    @property
    def explore_prob(self) -> float:
        return self.epsilon if self.epsilon_literal else 1.0 - self.epsilon


@dataclass
class Transition:
    """One actor/critic turn: user observation, sampled beam, chosen phases, outcome."""

    obs: np.ndarray
    action: np.ndarray
    logp_old: float
    phases: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    f0: float = 0.0
    L_r: float = 0.0
    rates: np.ndarray | None = None
    H: np.ndarray | None = None
    worker: int = 0
    generation: int = 0
    user: int = 0
    episode: int = 0


@dataclass
class TrajectoryBatch:
    records: list[Transition] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, t: Transition):
        if not np.isfinite(t.reward):
            raise ValueError("non-finite reward")
        self.records.append(t)

    def stack(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

def advantage_mc(rewards, values, gamma: float, convention: str = "printed") -> np.ndarray:
    """Monte-Carlo advantage by backward recursion.

    ``printed`` sums only rewards strictly after t; ``corrected`` includes r_t.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.size == 0:
        raise ValueError("empty batch")
    T = r.size
    G = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        if convention == "printed":
            G[t] = acc  # sum_{t' > t} gamma^(t'-t) r_t'
            acc = gamma * (r[t] + acc)
        else:
            acc = r[t] + gamma * acc
            G[t] = acc
    return G - v[:T]


def l_step_advantage(rewards, values, gamma: float, L: int, convention: str = "printed") -> np.ndarray:
    """L-step bootstrapped advantage.

    ``values`` has length T+1; ``values[T]`` is the value after the last
    step (0 for a terminal state).  Windows running past the horizon are
    truncated and bootstrap with 0.

    printed:   sum_{l=1..L} gamma^(l-1) r_t + gamma^(L-1) v_{t+L} - v_t
    corrected: sum_{l=1..L} gamma^(l-1) r_{t+l-1} + gamma^L v_{t+L} - v_t
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    T = r.size
    if v.size != T + 1:
        raise ValueError("values must hold one entry per step plus the final state")
    A = np.empty(T)
    for t in range(T):
        n = min(L, T - t)
        disc = gamma ** np.arange(n)
        boot = v[t + L] if t + L <= T else 0.0
        if convention == "printed":
            A[t] = disc.sum() * r[t] + gamma ** (L - 1) * boot - v[t]
        else:
            A[t] = disc @ r[t:t + n] + gamma ** L * boot - v[t]
    return A


# ---------------------------------------------------------------------------
# surrogate objectives
# ---------------------------------------------------------------------------

@dataclass
class SurrogateResult:
    value: float
    grad_logp: np.ndarray  # d objective / d new_logp, per record
    mean_ratio: float
    rejected: int = 0
    kl: float = 0.0


def ppo_clip_loss(new_logp, old_logp, advantages, clip_eps: float) -> SurrogateResult:
    """Mean of min(ratio A, clip(ratio) A); to be maximized.

    Records whose ratio is not finite are dropped and counted in ``rejected``.
    """
    new_logp = np.asarray(new_logp, float)
    A = np.asarray(advantages, float)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(new_logp - np.asarray(old_logp, float))
    ok = np.isfinite(ratio) & np.isfinite(A)
    rejected = int((~ok).sum())
    if rejected:
        log.warning("ppo_clip_loss: rejected %d records with non-finite ratio", rejected)
    grad = np.zeros_like(ratio)
    if not ok.any():
        return SurrogateResult(0.0, grad, float("nan"), rejected)
    r, a = ratio[ok], A[ok]
    unclipped = r * a
    clipped = np.clip(r, 1 - clip_eps, 1 + clip_eps) * a
    obj = np.minimum(unclipped, clipped)
    # gradient flows only where the unclipped arm is selected
    live = unclipped <= clipped
    g = np.where(live, r * a, 0.0) / ok.sum()
    grad[ok] = g
    return SurrogateResult(float(obj.mean()), grad, float(r.mean()), rejected)


@dataclass
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray


def _kl_gauss(p: DiagGaussian, q: DiagGaussian) -> np.ndarray:
    return (np.log(q.std / p.std) + (p.std ** 2 + (p.mean - q.mean) ** 2) / (2 * q.std ** 2) - 0.5)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def _quad_nodes(h: TruncGaussHead):
    lo, hi = h._bounds()
    half = 0.5 * (hi - lo)
    x = (0.5 * (hi + lo))[..., None] + half[..., None] * _GL_X
    w = half[..., None] * _GL_W
    return x, w


def _trunc_logpdf(h: TruncGaussHead, x):
    expand = TruncGaussHead(h.mean[..., None], h.std[..., None],
                            np.asarray(h._bounds()[0])[..., None], np.asarray(h._bounds()[1])[..., None])
    return expand.logprob_terms(x), expand


def kl_divergence(old, new) -> np.ndarray:
    """KL(old || new) summed over the last axis.

    Gaussian pairs use the closed form; truncated pairs on the same support
    use 64-point Gauss-Legendre quadrature per dimension.
    """
    if isinstance(old, DiagGaussian) and isinstance(new, DiagGaussian):
        return _kl_gauss(old, new).sum(axis=-1)
    if isinstance(old, TruncGaussHead) and isinstance(new, TruncGaussHead):
        lo1, hi1 = old._bounds()
        lo2, hi2 = new._bounds()
        if not (np.array_equal(lo1, lo2) and np.array_equal(hi1, hi2)):
            raise ValueError("truncated distributions must share their support")
        x, w = _quad_nodes(old)
        lp_old, _ = _trunc_logpdf(old, x)
        lp_new, _ = _trunc_logpdf(new, x)
        return (w * np.exp(lp_old) * (lp_old - lp_new)).sum(axis=-1).sum(axis=-1)
    raise TypeError(f"unsupported distribution pair {type(old).__name__}/{type(new).__name__}")


def kl_grad_new(old: TruncGaussHead, new: TruncGaussHead) -> tuple[np.ndarray, np.ndarray]:
    """d KL(old || new) / d (new.mean, new.std) by the same quadrature."""
    x, w = _quad_nodes(old)
    lp_old, _ = _trunc_logpdf(old, x)
    _, expand = _trunc_logpdf(new, x)
    dm, ds = expand.grad_logprob(x)
    p = w * np.exp(lp_old)
    return -(p * dm).sum(axis=-1), -(p * ds).sum(axis=-1)


def ppo_kl_loss(new_logp, old_logp, advantages, new_dist, old_dist, lambda_kl: float) -> SurrogateResult:
    """mean(ratio A) - lambda_KL mean KL(old || new); to be maximized."""
    A = np.asarray(advantages, float)
    ratio = np.exp(np.asarray(new_logp, float) - np.asarray(old_logp, float))
    kl = float(np.mean(kl_divergence(old_dist, new_dist)))
    value = float(np.mean(ratio * A)) - lambda_kl * kl
    return SurrogateResult(value, ratio * A / A.size, float(ratio.mean()), 0, kl)


# ---------------------------------------------------------------------------
# phase selection
# ---------------------------------------------------------------------------

def epsilon_greedy_phase(q_values, explore: float, rng: np.random.Generator) -> np.ndarray:
    """Per element: uniform random index with probability ``explore``, else argmax.

    ``np.argmax`` returns the lowest index among ties.  Both random draws are
    taken every call so the stream position does not depend on ``explore``.
    """
    q = np.asarray(q_values, dtype=float)
    n, levels = q.shape
    coin = rng.uniform(size=n)
    rand = rng.integers(0, levels, size=n)
    return np.where(coin < explore, rand, np.argmax(q, axis=1))


# ---------------------------------------------------------------------------
# actor and critic
# ---------------------------------------------------------------------------

def channel_features(h: np.ndarray) -> np.ndarray:
    """Complex channel column(s) -> real features [Re | Im] along the last axis."""
    h = np.asarray(h)
    return np.concatenate([h.real, h.imag], axis=-1)


class Actor:
    """Per-user beam policy: h_k -> truncated Gaussian over [Re w_k | Im w_k]."""

    def __init__(self, M: int, bound: float, rng: np.random.Generator, hidden: int = 30,
                 std_min: float = 1e-3, net: DenseNet | None = None):
        self.M, self.bound = M, bound
        self.std_min = std_min * bound
        self.net = net or DenseNet.init([2 * M, hidden, 4 * M], ["relu", "identity"], rng)

    def head(self, obs) -> TruncGaussHead:
        mean, std = gauss_params(self.net.forward(obs), self.bound, self.std_min)
        return TruncGaussHead(mean, std, -self.bound, self.bound)

    def act(self, obs, rng) -> tuple[np.ndarray, float]:
        mean, std = gauss_params(self.net.predict(obs), self.bound, self.std_min)
        h = TruncGaussHead(mean, std, -self.bound, self.bound)
        a = h.sample(rng)
        return a, h.logprob(a)

    def mean_action(self, obs) -> np.ndarray:
        return gauss_params(self.net.predict(obs), self.bound, self.std_min)[0]

    def beam(self, action) -> np.ndarray:
        a = np.asarray(action)
        return a[..., :self.M] + 1j * a[..., self.M:]

    def clone(self) -> "Actor":
        return Actor(self.M, self.bound, None, std_min=self.std_min / self.bound, net=self.net.clone())


class Critic:
    """Shared trunk with outputs [value, Q(n, i) for n < N, i < 2^b]."""

    def __init__(self, M: int, N: int, levels: int, rng: np.random.Generator, hidden: int = 20,
                 lr: float = 2e-3, sync_every: int = 100, net: DenseNet | None = None):
        self.N, self.levels = N, levels
        self.net = net or DenseNet.init([2 * M, hidden, 1 + N * levels], ["relu", "identity"], rng)
        self.target = self.net.clone()
        self.opt = Adam(self.net, lr)
        self.sync_every = sync_every
        self.updates = 0

    def value(self, obs) -> np.ndarray:
        return self.net.predict(obs)[..., 0]

    def q_values(self, obs) -> np.ndarray:
        out = self.net.predict(obs)[..., 1:]
        return out.reshape(out.shape[:-1] + (self.N, self.levels))

    def target_outputs(self, obs):
        out = self.target.predict(obs)
        return out[..., 0], out[..., 1:].reshape(out.shape[:-1] + (self.N, self.levels))


def critic_grads(records, net: DenseNet, target: DenseNet, N: int, levels: int,
                 gamma: float) -> tuple[list, dict]:
    """Squared-loss gradients for both critic heads against ``target`` bootstraps.

    Value target: r + gamma v'(next); Q target for every element's chosen
    index: r + gamma mean_n max_i Q'(next, n, i), one scalar shared by all
    elements.
    """
    if not records:
        raise ValueError("empty batch")
    obs = np.array([r.obs for r in records])
    nxt = np.array([r.next_obs for r in records])
    rew = np.array([r.reward for r in records])
    alive = 1.0 - np.array([r.done for r in records], dtype=float)
    idx = np.array([r.phases for r in records])
    B = len(records)
    t_out = target.predict(nxt)
    v_next = t_out[:, 0]
    q_next = t_out[:, 1:].reshape(B, N, levels)
    y_v = rew + gamma * alive * v_next
    y_q = rew + gamma * alive * q_next.max(axis=-1).mean(axis=-1)
    out = net.forward(obs)
    q = out[:, 1:].reshape(B, N, levels)
    q_sel = np.take_along_axis(q, idx[..., None], axis=-1)[..., 0]
    err_v = out[:, 0] - y_v
    err_q = q_sel - y_q[:, None]
    g = np.zeros_like(out)
    g[:, 0] = err_v / B
    gq = np.zeros_like(q)
    np.put_along_axis(gq, idx[..., None], (err_q / (B * N))[..., None], axis=-1)
    g[:, 1:] = gq.reshape(B, -1)
    losses = {"value_loss": float(0.5 * np.mean(err_v ** 2)),
              "q_loss": float(0.5 * np.mean(err_q ** 2))}
    return net.backward(g), losses


def critic_update(records, critic: Critic, gamma: float) -> dict:
    """One Adam step on both heads; the target copy is re-synced every ``sync_every`` updates."""
    grads, losses = critic_grads(records, critic.net, critic.target, critic.N, critic.levels, gamma)
    critic.opt.step(grads)
    critic.updates += 1
    if critic.updates % critic.sync_every == 0:
        critic.target = critic.net.clone()
    return losses


class ReplayMemory:
    """Fixed-capacity FIFO with uniform sampling without replacement."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list = []
        self._next = 0

    def __len__(self):
        return len(self.items)

    def add(self, item):
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            self.items[self._next] = item
        self._next = (self._next + 1) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> list:
        if not self.items:
            return []
        k = min(n, len(self.items))
        return [self.items[i] for i in rng.choice(len(self.items), size=k, replace=False)]


def ppo_actor_update(actor: Actor, opt: Adam, records, advantages, cfg: PpoConfig,
                     rng: np.random.Generator) -> dict:
    """Several epochs of minibatch ascent on the clipped (or KL-penalized) surrogate."""
    n = len(records)
    stats = {"clip_loss": 0.0, "mean_ratio": 1.0, "kl": 0.0, "rejected": 0}
    if n == 0 or opt.lr == 0:
        return stats
    obs = np.array([r.obs for r in records])
    act = np.array([r.action for r in records])
    old = np.array([r.logp_old for r in records])
    A = np.asarray(advantages, float)
    if cfg.mode == "klpen":
        old_mean, old_std = gauss_params(actor.net.predict(obs), actor.bound, actor.std_min)
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            mb = order[start:start + cfg.batch_size]
            z = actor.net.forward(obs[mb])
            mean, std = gauss_params(z, actor.bound, actor.std_min)
            head = TruncGaussHead(mean, std, -actor.bound, actor.bound)
            new = head.logprob_terms(act[mb]).sum(axis=-1)
            if cfg.mode == "clip":
                res = ppo_clip_loss(new, old[mb], A[mb], cfg.clip_eps)
                dkl_m = dkl_s = 0.0
            else:
                old_head = TruncGaussHead(old_mean[mb], old_std[mb], -actor.bound, actor.bound)
                res = ppo_kl_loss(new, old[mb], A[mb], head, old_head, cfg.kl_coef)
                dkl_m, dkl_s = kl_grad_new(old_head, head)
                dkl_m, dkl_s = cfg.kl_coef * dkl_m / len(mb), cfg.kl_coef * dkl_s / len(mb)
            dm, ds = head.grad_logprob(act[mb])
            gl = res.grad_logp[:, None]
            # ascent on the objective = descent on its negative
            dz = gauss_params_backward(z, actor.bound, -(gl * dm) + dkl_m, -(gl * ds) + dkl_s)
            opt.step(actor.net.backward(dz))
            stats = {"clip_loss": res.value, "mean_ratio": res.mean_ratio, "kl": res.kl,
                     "rejected": stats["rejected"] + res.rejected}
    return stats


class MetricsLog:
    """Training metrics rows: update_idx, clip_loss, value_loss, q_loss, mean_ratio, kl."""

    COLUMNS = ("update_idx", "clip_loss", "value_loss", "q_loss", "mean_ratio", "kl")

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row):
        self.rows.append({c: row.get(c, float("nan")) for c in self.COLUMNS})

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in self.COLUMNS])
