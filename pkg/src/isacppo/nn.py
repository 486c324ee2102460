"""Small dense networks with exact reverse-mode gradients, Adam, and the
truncated-Gaussian action head used by the actor.

Inputs may be a single vector ``(d,)`` or a batch ``(B, d)``; parameter
gradients are summed over the batch.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import ContractViolation, InvalidDimensionError

ACTIVATIONS = ("relu", "tanh", "softplus", "identity")
_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return z


def _act_grad(name, z, y):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - y * y
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid
    return np.ones_like(z)


@dataclass
class Dense:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "identity"

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise InvalidDimensionError("layer weight/bias shapes disagree")


class DenseNet:
    """Feed-forward stack of ``Dense`` layers."""

    def __init__(self, layers: list[Dense]):
        if not layers:
            raise InvalidDimensionError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise InvalidDimensionError(
                    f"layer dims do not chain: {a.W.shape} -> {b.W.shape}")
        self.layers = layers
        self._version = 0
        self._cache = None

    @classmethod
    def init(cls, sizes, activations, rng: np.random.Generator) -> "DenseNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
            s = 1.0 / np.sqrt(fan_in)
            layers.append(Dense(rng.uniform(-s, s, (fan_out, fan_in)),
                                rng.uniform(-s, s, fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def param_count(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    def touch(self):
        """Mark parameters as modified; invalidates any forward cache."""
        self._version += 1

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.param_count,):
            raise InvalidDimensionError(f"expected {self.param_count} parameters, got {flat.shape}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        self.touch()

    def clone(self) -> "DenseNet":
        net = DenseNet(copy.deepcopy(self.layers))
        return net

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise InvalidDimensionError(f"input dim {x.shape} does not match {self.in_dim}")
        acts = [X]
        pre = []
        for l in self.layers:
            z = acts[-1] @ l.W.T + l.b
            pre.append(z)
            acts.append(_act(l.act, z))
        self._cache = (self._version, single, acts, pre)
        return acts[-1][0] if single else acts[-1]

    def predict(self, x) -> np.ndarray:
        """Forward pass that leaves the gradient cache alone."""
        saved = self._cache
        try:
            return self.forward(x)
        finally:
            self._cache = saved

    def backward(self, grad_out) -> list[np.ndarray]:
        """Gradients [dW0, db0, dW1, db1, ...] for upstream dLoss/dy.

        The input gradient of the last call is left in ``self.input_grad``.
        """
        if self._cache is None:
            raise ContractViolation("backward called before forward")
        version, single, acts, pre = self._cache
        if version != self._version:
            raise ContractViolation("parameters changed since the cached forward pass")
        g = np.asarray(grad_out, dtype=float)
        g = g[None, :] if single else g
        if g.shape != acts[-1].shape:
            raise InvalidDimensionError("upstream gradient shape does not match the output")
        grads = []
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            dz = g * _act_grad(l.act, pre[i], acts[i + 1])
            grads.append(dz.sum(axis=0))
            grads.append(dz.T @ acts[i])
            g = dz @ l.W
        self.input_grad = g[0] if single else g
        return grads[::-1]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_step(params, grads, m, v, t: int, lr: float, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam descent step; returns new (params, m, v)."""
    b1, b2 = betas
    out_p, out_m, out_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v, strict=True):
        if p.shape != g.shape:
            raise InvalidDimensionError("parameter and gradient shapes differ")
        mi = b1 * mi + (1 - b1) * g
        vi = b2 * vi + (1 - b2) * g * g
        mhat = mi / (1 - b1 ** t)
        vhat = vi / (1 - b2 ** t)
        out_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        out_m.append(mi)
        out_v.append(vi)
    return out_p, out_m, out_v


class Adam:
    """Stateful Adam bound to one network (descent on the given gradients)."""

    def __init__(self, net: DenseNet, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.net, self.lr, self.betas, self.eps = net, lr, betas, eps
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]
        self.t = 0

    def step(self, grads):
        if self.lr == 0:
            return
        self.t += 1
        params = self.net.params()
        new, self.m, self.v = adam_step(params, grads, self.m, self.v, self.t,
                                        self.lr, self.betas, self.eps)
        for p, q in zip(params, new):
            p[...] = q
        self.net.touch()

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


# ---------------------------------------------------------------------------
# truncated Gaussian head
# ---------------------------------------------------------------------------

def _log_mass(alpha, beta):
    """log(Phi(beta) - Phi(alpha)) without cancellation in either tail."""
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float))
    out = np.empty(alpha.shape)
    upper = alpha > 0
    lower = beta <= 0
    mid = ~(upper | lower)
    # both bounds in the lower tail
    la, lb = log_ndtr(alpha[lower]), log_ndtr(beta[lower])
    out[lower] = lb + np.log1p(-np.exp(la - lb))
    # mirror the upper tail onto the lower one
    la, lb = log_ndtr(-beta[upper]), log_ndtr(-alpha[upper])
    out[upper] = lb + np.log1p(-np.exp(la - lb))
    out[mid] = np.log1p(-ndtr(alpha[mid]) - ndtr(-beta[mid]))
    return out


def _std_pdf(z):
    with np.errstate(over="ignore"):
        return np.exp(-0.5 * z * z - _LOG_SQRT_2PI)


@dataclass
class TruncGaussHead:
    """Independent truncated normals N(mean, std^2) restricted to [low, high]."""

    mean: np.ndarray
    std: np.ndarray
    low: float | np.ndarray
    high: float | np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(self.std < 0):
            raise ValueError("std must be non-negative")
        if np.any(np.asarray(self.high) < np.asarray(self.low)):
            raise ValueError("empty truncation interval")

    def _bounds(self):
        lo = np.broadcast_to(np.asarray(self.low, float), self.mean.shape)
        hi = np.broadcast_to(np.asarray(self.high, float), self.mean.shape)
        return lo, hi

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Inverse-CDF sampling; the upper tail is mirrored for precision."""
        lo, hi = self._bounds()
        mu, sd = self.mean, self.std
        u = rng.uniform(size=mu.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = (lo - mu) / sd
            beta = (hi - mu) / sd
            flip = alpha > 0
            a = np.where(flip, -beta, alpha)
            b = np.where(flip, -alpha, beta)
            Fa, Fb = ndtr(a), ndtr(b)
            z = ndtri(Fa + u * (Fb - Fa))
            z = np.where(flip, -z, z)
            x = mu + sd * z
        # zero std or vanishing mass: the distribution collapses onto clamp(mean)
        degenerate = ~np.isfinite(x) | (sd == 0)
        x = np.where(degenerate, mu, x)
        return np.clip(x, lo, hi)

    def logprob_terms(self, x) -> np.ndarray:
        """Per-dimension log densities (point-mass dimensions contribute 0)."""
        lo, hi = self._bounds()
        x, mu, sd, lo, hi = np.broadcast_arrays(np.asarray(x, dtype=float), self.mean, self.std, lo, hi)
        point = hi == lo
        out = np.zeros(x.shape)
        live = ~point
        if np.any(live):
            mu_l, sd_l = mu[live], sd[live]
            z = (x[live] - mu_l) / sd_l
            alpha = (lo[live] - mu_l) / sd_l
            beta = (hi[live] - mu_l) / sd_l
            out[live] = -np.log(sd_l) - 0.5 * z * z - _LOG_SQRT_2PI - _log_mass(alpha, beta)
        return out

    def logprob(self, x) -> float:
        return float(self.logprob_terms(x).sum())

    def grad_logprob(self, x) -> tuple[np.ndarray, np.ndarray]:
        """d logprob / d mean and d logprob / d std, truncation normalizer included."""
        x = np.asarray(x, dtype=float)
        lo, hi = self._bounds()
        mu, sd = self.mean, self.std
        z = (x - mu) / sd
        alpha = (lo - mu) / sd
        beta = (hi - mu) / sd
        logZ = _log_mass(alpha, beta)
        with np.errstate(under="ignore", over="ignore", invalid="ignore"):
            pa = np.where(np.isfinite(alpha), np.exp(-0.5 * alpha * alpha - _LOG_SQRT_2PI - logZ), 0.0)
            pb = np.where(np.isfinite(beta), np.exp(-0.5 * beta * beta - _LOG_SQRT_2PI - logZ), 0.0)
            apa = np.where(np.isfinite(alpha), alpha * pa, 0.0)
            bpb = np.where(np.isfinite(beta), beta * pb, 0.0)
        d_mean = z / sd - (pa - pb) / sd
        d_std = (z * z - 1.0) / sd - (apa - bpb) / sd
        point = hi == lo
        return np.where(point, 0.0, d_mean), np.where(point, 0.0, d_std)


def sample_and_logprob(head: TruncGaussHead, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    a = head.sample(rng)
    return a, head.logprob(a)


def gauss_params(z: np.ndarray, bound: float, std_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Split raw outputs [z_mean | z_std] into a tanh-bounded mean and a softplus std."""
    z = np.asarray(z, dtype=float)
    d = z.shape[-1] // 2
    mean = bound * np.tanh(z[..., :d])
    std = bound * np.logaddexp(0.0, z[..., d:]) + std_min
    return mean, std


def gauss_params_backward(z: np.ndarray, bound: float, d_mean, d_std) -> np.ndarray:
    """Chain rule through ``gauss_params``."""
    z = np.asarray(z, dtype=float)
    d = z.shape[-1] // 2
    t = np.tanh(z[..., :d])
    sig = 0.5 * (1.0 + np.tanh(0.5 * z[..., d:]))
    return np.concatenate([d_mean * bound * (1 - t * t), d_std * bound * sig], axis=-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_npz(path, **nets: DenseNet):
    """Store each named network's layers as ``<name>.<i>.W/b/act`` arrays."""
    arrays = {}
    for name, net in nets.items():
        for i, l in enumerate(net.layers):
            arrays[f"{name}.{i}.W"] = l.W
            arrays[f"{name}.{i}.b"] = l.b
            arrays[f"{name}.{i}.act"] = np.array(l.act)
    np.savez(path, **arrays)


def load_npz(path) -> dict[str, DenseNet]:
    with np.load(path) as data:
        keys = list(data.keys())
        names = sorted({k.split(".")[0] for k in keys})
        out = {}
        for name in names:
            n = 1 + max(int(k.split(".")[1]) for k in keys if k.startswith(name + "."))
            out[name] = DenseNet([Dense(data[f"{name}.{i}.W"].copy(), data[f"{name}.{i}.b"].copy(),
                                        str(data[f"{name}.{i}.act"])) for i in range(n)])
    return out
