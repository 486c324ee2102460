"""Experiment orchestration: train or evaluate, then write plot-ready CSVs.

Artifacts in the output directory:

    reward_curve.csv          seed, episode, raw, moving_avg
    constraint.csv            seed, episode, L_r, greedy_L_r, ell, constraint_ok, mu
    beampattern.csv           seed, angle_deg, power   (peak-normalized)
    capacity_vs_power.csv     power_dbm, P_max_W, capacity
    capacity_vs_elements.csv  N, with_irs, without_irs
    config.ini                the materialized configuration
    checkpoints/seed<s>.npz   trained networks (learning algorithms only)
    manifest.json             config hash, seeds, status, sha256 of every file
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import traceback
from pathlib import Path

import numpy as np

from .baselines import mrt_beamforming, run_a3c, wmmse, zf_beamforming
from .channel import synthesize_channels
from .config import ExperimentConfig, dump_config
from .dppo import Learner, TrainingLog, policy_beams, run_training_dppo, run_training_miso
from .env import (
    DEG, ScenarioConfig, beampattern_mse_beams, effective_channel, initial_phase,
    pattern_from_beams, phase_matrix, power_projection, sum_rate_reward,
)
from .policy import channel_features

log = logging.getLogger(__name__)

TRAINED = ("ppo_pd", "dppo_pd", "a2c_pd", "a3c")
EVAL_STREAM = 9


def emit_moving_average(series, window: int) -> np.ndarray:
    """Trailing mean over ``window`` points; the first entries average what is available."""
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("cannot average an empty series")
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def dbm_to_watts(dbm) -> np.ndarray:
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# evaluation on held-out channels
# ---------------------------------------------------------------------------

def eval_channels(sc: ScenarioConfig, seed: int, count: int):
    """Held-out channel/phase pairs, independent of the training streams."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, EVAL_STREAM, i])
        cs = synthesize_channels(sc.M, sc.K, sc.N, sc.R, sc.channel, rng)
        out.append((cs, initial_phase(sc, rng)))
    return out


def greedy_phases(critic_net, H: np.ndarray, sc: ScenarioConfig):
    """Per-element argmax of the critic's Q values averaged over the users' observations."""
    cols = H.reshape(-1, sc.M, H.shape[-1]).transpose(0, 2, 1).reshape(-1, sc.M)
    q = critic_net.predict(channel_features(cols))[:, 1:].mean(axis=0).reshape(sc.N, sc.n_levels)
    return phase_matrix(np.argmax(q, axis=1), sc)


def _sum_rate(H: np.ndarray, W_of, sc: ScenarioConfig) -> float:
    """Sum rate over all users; MIMO channels (K, M, R) are evaluated per user."""
    blocks = H[None] if H.ndim == 2 else H
    return float(sum(sum_rate_reward(h, W_of(h), sc)[1] for h in blocks))


def policy_capacity(actor, H: np.ndarray, sc: ScenarioConfig, P_max: float | None = None) -> float:
    """Sum rate of the deterministic policy; beams are rescaled to ``P_max``."""
    scale = 1.0 if P_max is None else math.sqrt(P_max / sc.P_max)
    cap = sc.per_antenna_power * scale ** 2

    def beams(h):
        return power_projection(policy_beams(actor, h[None])[0] * scale, cap).W

    return _sum_rate(H, beams, sc)


def _baseline_beams(algo: str, sc: ScenarioConfig, P_max: float):
    if algo == "zf":
        return lambda h: zf_beamforming(h, P_max).W
    if algo == "mrt":
        return lambda h: mrt_beamforming(h, P_max).W
    return lambda h: wmmse(h, P_max, sc.sigma_c2, log_base=sc.log_base).W


# ---------------------------------------------------------------------------
# training dispatch
# ---------------------------------------------------------------------------

def train(cfg: ExperimentConfig, seed: int) -> TrainingLog:
    t = cfg.train
    if cfg.algo == "ppo_pd":
        return run_training_miso(t, seed) if t.workers == 1 else run_training_dppo(t, seed)
    if cfg.algo == "a2c_pd":
        t = dataclasses.replace(t, policy_objective="a2c")
        return run_training_miso(t, seed) if t.workers == 1 else run_training_dppo(t, seed)
    if cfg.algo == "dppo_pd":
        return run_training_dppo(t, seed)
    if cfg.algo == "a3c":
        return run_a3c(t, seed)
    raise ValueError(f"{cfg.algo} is not a learning algorithm")


def _angles(sc: ScenarioConfig) -> np.ndarray:
    return np.round(sc.grid() / DEG, 6)


class _Tables:
    def __init__(self):
        self.reward, self.constraint, self.pattern = [], [], []
        self.power: dict[float, list] = {}
        self.elements: dict[int, list] = {}


def _trained_seed(cfg: ExperimentConfig, seed: int, out: Path, tab: _Tables):
    sc = cfg.train.scenario
    tlog = train(cfg, seed)
    learner: Learner = tlog.learner
    raw = tlog.column("reward")
    ma = emit_moving_average(raw, cfg.ma_window)
    for row, m in zip(tlog.episodes, ma):
        tab.reward.append((seed, row["episode"], row["reward"], m))
        tab.constraint.append((seed, row["episode"], row["L_r"], row["greedy_L_r"], sc.ell,
                               row["greedy_L_r"] <= sc.ell, row["mu"]))
    P = pattern_from_beams(tlog.final_W, sc)
    P = P / P.max() if P.max() > 0 else P
    tab.pattern += [(seed, a, p) for a, p in zip(_angles(sc), P)]

    evals = eval_channels(sc, seed, cfg.eval_channels)
    hs = [effective_channel(cs, greedy_phases(learner.critic.net, effective_channel(cs, pc), sc))
          for cs, pc in evals]
    for dbm, watts in zip(cfg.power_dbm, dbm_to_watts(cfg.power_dbm)):
        tab.power.setdefault(dbm, []).append(
            np.mean([policy_capacity(learner.actor, h, sc, watts) for h in hs]))

    for n in cfg.elements:
        tab.elements.setdefault(n, []).append(
            [elements_capacity(learner.actor, sc, n, seed, cfg.eval_channels, irs)
             for irs in (True, False)])
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    learner.save(ck / f"seed{seed}.npz")


def elements_capacity(actor, sc: ScenarioConfig, N: int, seed: int, count: int, irs: bool,
                      beams=None) -> float:
    """Mean sum rate over held-out channels with an N-element IRS and random phases.

    With ``irs=False`` the IRS->user link is zeroed, so the result cannot depend on N.
    """
    sc_n = dataclasses.replace(sc, N=N, channel=dataclasses.replace(sc.channel, irs_enabled=irs))
    vals = []
    for cs, pc in eval_channels(sc_n, seed, count):
        H = effective_channel(cs, pc)
        vals.append(policy_capacity(actor, H, sc_n) if beams is None else _sum_rate(H, beams, sc_n))
    return float(np.mean(vals))


def _baseline_seed(cfg: ExperimentConfig, seed: int, tab: _Tables):
    sc = cfg.train.scenario
    evals = eval_channels(sc, seed, cfg.eval_channels)
    hs = [effective_channel(cs, pc) for cs, pc in evals]
    beams = _baseline_beams(cfg.algo, sc, sc.P_max)
    cap = float(np.mean([_sum_rate(h, beams, sc) for h in hs]))
    tab.reward.append((seed, 0, cap, cap))
    H0 = hs[0][None] if hs[0].ndim == 2 else hs[0]
    W = beams(H0[0])
    Lr = beampattern_mse_beams(W, sc)
    tab.constraint.append((seed, 0, Lr, Lr, sc.ell, Lr <= sc.ell, 0.0))
    P = pattern_from_beams(W, sc)
    P = P / P.max() if P.max() > 0 else P
    tab.pattern += [(seed, a, p) for a, p in zip(_angles(sc), P)]
    for dbm, watts in zip(cfg.power_dbm, dbm_to_watts(cfg.power_dbm)):
        b = _baseline_beams(cfg.algo, sc, float(watts))
        tab.power.setdefault(dbm, []).append(np.mean([_sum_rate(h, b, sc) for h in hs]))
    for n in cfg.elements:
        tab.elements.setdefault(n, []).append(
            [elements_capacity(None, sc, n, seed, cfg.eval_channels, irs, beams) for irs in (True, False)])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _write_tables(cfg: ExperimentConfig, out: Path, tab: _Tables):
    write_csv(out / "reward_curve.csv", ["seed", "episode", "raw", "moving_avg"], tab.reward)
    write_csv(out / "constraint.csv",
              ["seed", "episode", "L_r", "greedy_L_r", "ell", "constraint_ok", "mu"], tab.constraint)
    write_csv(out / "beampattern.csv", ["seed", "angle_deg", "power"], tab.pattern)
    write_csv(out / "capacity_vs_power.csv", ["power_dbm", "P_max_W", "capacity"],
              [(d, dbm_to_watts(d), np.mean(v)) for d, v in tab.power.items()])
    write_csv(out / "capacity_vs_elements.csv", ["N", "with_irs", "without_irs"],
              [(n, np.mean([p[0] for p in v]), np.mean([p[1] for p in v])) for n, v in tab.elements.items()])


def _manifest(cfg: ExperimentConfig, out: Path, status: str, error: str | None = None):
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    doc = {
        "config_hash": cfg.hash(),
        "algo": cfg.algo,
        "seeds": list(cfg.seeds),
        "status": status,
        "files": {str(p.relative_to(out)): sha256_file(p) for p in files},
    }
    if error is not None:
        doc["failure"] = error
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def run_experiment(cfg: ExperimentConfig, out_dir) -> Path:
    """Run every seed of ``cfg`` and write the artifact set into ``out_dir``.

    A failure part-way still leaves a manifest with ``status: "failed"`` and the
    error message, then re-raises.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    tab = _Tables()
    try:
        for seed in cfg.seeds:
            log.info("%s: seed %d", cfg.algo, seed)
            if cfg.algo in TRAINED:
                _trained_seed(cfg, seed, out, tab)
            else:
                _baseline_seed(cfg, seed, tab)
        _write_tables(cfg, out, tab)
    except Exception as exc:
        _manifest(cfg, out, "failed", f"{type(exc).__name__}: {exc}")
        log.error("experiment failed:\n%s", traceback.format_exc())
        raise
    _manifest(cfg, out, "complete")
    return out
