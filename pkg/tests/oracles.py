"""Independent reference computations shared by the unit and acceptance tests."""
import math

import numpy as np

from isacppo.nn import DenseNet


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        dn = f(x)
        flat[i] = old
        gf[i] = (up - dn) / (2 * h)
    return g


def rel_err(a, b) -> float:
    """Norm-wise relative error, safe when both sides vanish."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def random_net(act: str, rng: np.random.Generator) -> DenseNet:
    depth = int(rng.integers(1, 4))
    sizes = [int(s) for s in rng.integers(1, 7, depth + 1)]
    return DenseNet.init(sizes, [act] * depth, rng)


def net_gradient_error(net: DenseNet, rng: np.random.Generator, batch: int = 3, h: float = 1e-5) -> float:
    """Max relative error of backward() against central differences (params and input)."""
    x = rng.standard_normal((batch, net.in_dim))
    c = rng.standard_normal((batch, net.out_dim))
    net.forward(x)
    grads = net.backward(c)
    input_grad = net.input_grad.copy()
    flat = net.get_flat()

    def loss_of_params(p):
        net.set_flat(p)
        return float(np.sum(c * net.predict(x)))

    fd_params = central_diff(loss_of_params, flat, h)
    net.set_flat(flat)
    fd_input = central_diff(lambda z: float(np.sum(c * net.predict(z))), x, h)
    analytic = np.concatenate([g.ravel() for g in grads])
    return max(rel_err(analytic, fd_params), rel_err(input_grad, fd_input))


def observed_order(alphas, errors) -> float:
    """Least-squares slope of log(error) against log(alpha)."""
    return float(np.polyfit(np.log(alphas), np.log(errors), 1)[0])


def grid_argmax(f, lo: float, hi: float, n: int = 1001) -> float:
    xs = np.linspace(lo, hi, n)
    return float(xs[int(np.argmax([f(x) for x in xs]))])


def scalar_mse_expansion(u, h, w, sigma2, k):
    """Hand expansion of the per-user MSE on scalar channels."""
    e = abs(np.conj(u[k]) * np.conj(h[k]) * w[k] - 1) ** 2
    e += sum(abs(np.conj(u[k]) * np.conj(h[k]) * w[l]) ** 2 for l in range(len(w)) if l != k)
    return e + sigma2 * abs(u[k]) ** 2


def local_max_indices(P: np.ndarray) -> np.ndarray:
    """Indices of strict-or-plateau local maxima (endpoints count if they beat their neighbour)."""
    left = np.concatenate([[-math.inf], P[:-1]])
    right = np.concatenate([P[1:], [-math.inf]])
    return np.flatnonzero((P >= left) & (P >= right) & ((P > left) | (P > right)))
