import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isacppo.baselines import (
    a3c_update, mmse_receivers, mrt_beamforming, mse_terms, run_a3c, wmmse, zf_beamforming,
)
from isacppo.dppo import TrainConfig
from isacppo.env import ScenarioConfig
from oracles import grid_argmax, scalar_mse_expansion


def cgauss(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def well_conditioned(rng, M=5, K=4, max_cond=100.0):
    while True:
        H = cgauss(rng, M, K)
        if np.linalg.cond(H) < max_cond:
            return H


def leakage(H, W):
    G = np.abs(H.conj().T @ W)
    return (G - np.diag(np.diag(G))).max(axis=1) / np.diag(G)


# -- zero-forcing and matched filter ----------------------------------------------------

def test_zf_leakage_on_well_conditioned_channels():
    rng = np.random.default_rng(0)
    worst = max(leakage(H, zf_beamforming(H, 1.0).W).max() for H in (well_conditioned(rng) for _ in range(200)))
    assert worst < 1e-6


def test_zf_respects_per_antenna_budget():
    rng = np.random.default_rng(1)
    for _ in range(50):
        W = zf_beamforming(well_conditioned(rng), 2.0).W
        assert np.all((np.abs(W) ** 2).sum(axis=1) <= 2.0 / 5 + 1e-12)


def test_zf_on_orthonormal_channel_is_proportional_to_it():
    Q, _ = np.linalg.qr(cgauss(np.random.default_rng(2), 5, 4))
    W = zf_beamforming(Q, 1.0).W
    ratio = W / Q
    np.testing.assert_allclose(ratio, ratio[0, 0], rtol=1e-10)


def test_single_user_zf_is_mrt():
    h = cgauss(np.random.default_rng(3), 5, 1)
    np.testing.assert_allclose(zf_beamforming(h, 1.0).W, mrt_beamforming(h, 1.0).W, atol=1e-12)


def test_rank_deficient_channel_warns():
    h = cgauss(np.random.default_rng(4), 5, 1)
    with pytest.warns(RuntimeWarning):
        zf_beamforming(np.hstack([h, h]), 1.0)


def test_mrt_beats_random_beams_single_user():
    rng = np.random.default_rng(5)
    h = cgauss(rng, 5, 1)
    w = mrt_beamforming(h, 1.0).W[:, 0]
    gain = abs(h[:, 0].conj() @ w) / np.linalg.norm(w)
    R = cgauss(rng, 10_000, 5)
    rand = np.abs(R @ h[:, 0].conj()) / np.linalg.norm(R, axis=1)
    assert gain >= rand.max()
    assert gain == pytest.approx(np.linalg.norm(h), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_mrt_invariant_to_channel_scale(seed, c):
    H = cgauss(np.random.default_rng(seed), 5, 4)
    np.testing.assert_allclose(mrt_beamforming(c * H, 1.0).W, mrt_beamforming(H, 1.0).W, atol=1e-12)


def test_mrt_zero_column_warns():
    H = cgauss(np.random.default_rng(6), 5, 2)
    H[:, 1] = 0
    with pytest.warns(RuntimeWarning):
        W = mrt_beamforming(H, 1.0).W
    assert np.all(W[:, 1] == 0)


# -- WMMSE --------------------------------------------------------------------------------

def test_wmmse_monotone_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(100):
        H = cgauss(rng, 5, 4)
        trace = np.array(wmmse(H, 1.0, 0.1, iters=30).trace)
        assert np.all(np.diff(trace) >= -1e-9)


def test_wmmse_scalar_single_user_uses_full_power():
    h, P, s2 = np.array([[0.7 - 0.4j]]), 2.0, 0.5
    res = wmmse(h, P, s2, iters=50, W0=np.array([[0.1]]))
    power = float(np.abs(res.W_raw[0, 0]) ** 2)
    best = grid_argmax(lambda p: math.log2(1 + abs(h[0, 0]) ** 2 * p / s2), 0.0, P, 2001)
    assert power == pytest.approx(best, abs=1e-3)
    assert res.trace[-1] == pytest.approx(math.log2(1 + abs(h[0, 0]) ** 2 * P / s2), abs=1e-6)


def test_wmmse_high_noise_limit_is_matched_filter():
    H = cgauss(np.random.default_rng(8), 5, 4)
    W = wmmse(H, 1.0, 1e8, iters=5).W_raw
    for k in range(4):
        cos = abs(H[:, k].conj() @ W[:, k]) / (np.linalg.norm(H[:, k]) * np.linalg.norm(W[:, k]))
        assert cos == pytest.approx(1.0, abs=1e-6)
        assert np.linalg.norm(W[:, k]) ** 2 == pytest.approx(1.0, rel=1e-6)


def test_wmmse_respects_budgets():
    rng = np.random.default_rng(9)
    res = wmmse(cgauss(rng, 5, 4), 1.0, 0.1, iters=20)
    assert np.all(np.linalg.norm(res.W_raw, axis=0) ** 2 <= 1.0 + 1e-9)
    assert np.all((np.abs(res.W) ** 2).sum(axis=1) <= 0.2 + 1e-12)
    with pytest.raises(ValueError):
        wmmse(cgauss(rng, 5, 4), 1.0, 0.1, iters=0)


def test_wmmse_beats_zf_and_mrt_at_moderate_snr():
    rng = np.random.default_rng(10)
    wins = 0
    for _ in range(20):
        H = cgauss(rng, 5, 4)
        W = wmmse(H, 1.0, 0.1, iters=100).W_raw
        rate = lambda X: np.sum(np.log2(1 + _sinr(H, X, 0.1)))
        wins += rate(W) >= max(rate(zf_beamforming(H, 4.0).W), rate(mrt_beamforming(H, 4.0).W)) - 1e-9
    assert wins >= 18


def _sinr(H, W, s2):
    G = np.abs(H.conj().T @ W) ** 2
    d = np.diag(G)
    return d / (G.sum(axis=1) - d + s2)


def test_mse_terms_match_hand_expansion():
    rng = np.random.default_rng(11)
    # diagonal channel: user k sees only antenna k, so every term is a scalar product
    h = cgauss(rng, 3)
    H = np.diag(h)
    W = cgauss(rng, 3, 3)
    u = mmse_receivers(H, W, 0.3)
    e = mse_terms(H, W, u, 0.3)
    for k in range(3):
        row = W[k]
        assert e[k] == pytest.approx(scalar_mse_expansion(u, h, row, 0.3, k), rel=1e-12)


def test_mmse_receiver_minimizes_mse():
    rng = np.random.default_rng(12)
    H, W = cgauss(rng, 4, 3), cgauss(rng, 4, 3)
    u = mmse_receivers(H, W, 0.2)
    e = mse_terms(H, W, u, 0.2)
    for _ in range(100):
        v = u + 0.05 * cgauss(rng, 3)
        assert np.all(mse_terms(H, W, v, 0.2) >= e - 1e-12)


# -- A3C -------------------------------------------------------------------------------

def test_a3c_update_zero_gradient_is_noop():
    p = [np.ones(3), np.zeros((2, 2))]
    a3c_update([np.zeros(3), np.zeros((2, 2))], p, 0.5)
    np.testing.assert_array_equal(p[0], 1.0)
    with pytest.raises(ValueError):
        a3c_update([np.zeros(2), np.zeros((2, 2))], p, 0.5)


def test_a3c_update_softmax_bandit_converges_to_best_arm():
    means = np.array([0.2, 1.0, 0.5])
    theta = [np.zeros(3)]
    lock = threading.Lock()
    rng = np.random.default_rng(13)

    def worker(seed):
        r = np.random.default_rng(seed)
        for _ in range(500):
            with lock:
                th = theta[0].copy()
            pi = np.exp(th - th.max())
            pi /= pi.sum()
            a = r.choice(3, p=pi)
            reward = means[a] + 0.1 * r.standard_normal()
            g = -pi * reward
            g[a] += reward
            a3c_update([g], theta, 0.1, lock)

    threads = [threading.Thread(target=worker, args=(int(s),)) for s in rng.integers(0, 2**31, 4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    pi = np.exp(theta[0] - theta[0].max())
    assert int(np.argmax(pi)) == 1 and pi[1] / pi.sum() > 0.9


def test_run_a3c_smoke():
    cfg = TrainConfig(scenario=ScenarioConfig(M=3, K=2, N=4, b=1), episodes=2, steps_per_episode=3, workers=2)
    log = run_a3c(cfg, 0)
    assert len(log.episodes) == 2 and log.learner.generation >= 4
    assert all(np.isfinite(e["reward"]) for e in log.episodes)
