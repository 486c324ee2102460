"""Experiment configuration: INI files with sections, named presets, validation.

Schema (every key optional; unknown sections or keys are rejected)::

    [experiment]  algo, episodes, steps_per_episode, seeds, preset, ma_window,
                  lr_actor, lr_critic, eval_channels, power_dbm, elements
    [scenario]    M, K, N, R, b, P_max, sigma_c2, ell, target_angles_deg,
                  Delta_deg, grid_res_deg, log_base, pattern_norm, gamma_min,
                  phi_shift, eps_exp
    [channel]     f, k_abs, G_t, G_r, d_over_lambda, Z, sigma_rough, n_NL,
                  rician_K, dist_bs_user, dist_bs_irs, dist_irs_user,
                  user_angles_deg, user_jitter_deg, normalize, irs_gain, irs_enabled
    [ppo]         clip_eps, kl_coef, gamma, epsilon, epsilon_literal, batch_size,
                  epochs_per_update, mode, L, convention, literal_values
    [runtime]     workers, horizon, quorum, deterministic, push, replay_capacity,
                  replay_batch, critic_steps, target_sync, actor_hidden,
                  critic_hidden, std_min, advantage
    [primal_dual] enabled, shape_reward, tau, alpha, lam0, mu0, x_variant

Keys ending in ``_deg`` are given in degrees and stored in radians.
Lists are comma separated.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
import math
import types
import typing
from dataclasses import dataclass, field

from .channel import ChannelConfig
from .dppo import TrainConfig
from .env import ScenarioConfig
from .errors import ConfigError
from .policy import PpoConfig

log = logging.getLogger(__name__)

ALGOS = ("ppo_pd", "dppo_pd", "a2c_pd", "a3c", "zf", "mrt", "wmmse")

PRESETS = {
    # values used for the headline simulations: 5 deg beams, peak-normalized pattern
    "paper-sim": {
        "scenario": {"M": 5, "K": 4, "N": 16, "b": 2, "P_max": 1.0, "sigma_c2": 0.1,
                     "Delta_deg": 5.0, "pattern_norm": "max", "ell": 1.0,
                     "target_angles_deg": (-40.0, 0.0, 40.0)},
        "channel": {"f": 0.55e12, "k_abs": 6.7141e-4},
    },
    # raw pattern MSE with enough power for ell in {1, 2, 3} to bind
    "functional": {
        "scenario": {"M": 5, "K": 4, "N": 16, "b": 2, "P_max": 10.0, "sigma_c2": 1.0,
                     "Delta_deg": 10.0, "pattern_norm": "raw", "ell": 1.0,
                     "target_angles_deg": (-40.0, 0.0, 40.0)},
        "channel": {"f": 0.55e12, "k_abs": 6.7141e-4},
    },
}


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    algo: str = "ppo_pd"
    seeds: tuple[int, ...] = (0,)
    preset: str | None = None
    ma_window: int = 50
    eval_channels: int = 20
    power_dbm: tuple[float, ...] = (10.0, 20.0, 30.0)
    elements: tuple[int, ...] = (4, 16, 36, 64)

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.ma_window < 1 or self.eval_channels < 1:
            raise ConfigError("ma_window and eval_channels must be >= 1")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


# key -> (target, field name, degrees?)
_EXPERIMENT_KEYS = {"algo", "episodes", "steps_per_episode", "seeds", "preset", "ma_window",
                    "lr_actor", "lr_critic", "eval_channels", "power_dbm", "elements"}
_RUNTIME_KEYS = {"workers", "horizon", "quorum", "deterministic", "push", "replay_capacity",
                 "replay_batch", "critic_steps", "target_sync", "actor_hidden", "critic_hidden",
                 "std_min", "advantage"}
_PD_KEYS = {"enabled": "primal_dual", "shape_reward": "shape_reward", "tau": "tau",
            "alpha": "alpha", "lam0": "lam0", "mu0": "mu0", "x_variant": "x_variant"}
_SCENARIO_SKIP = {"channel", "radar_gain", "target_elevations", "target_angles", "Delta", "grid_res"}
_CHANNEL_SKIP = {"user_angles", "user_jitter"}


def _fields(cls, skip=()):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in skip}


def _coerce(raw: str, hint, key: str):
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "yes", "true", "on"):
                return True
            if low in ("0", "no", "false", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple or hint is tuple:
            elem = args[0] if args else float
            return tuple(_coerce(p, elem, key) for p in text.split(",") if p.strip())
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _deg_tuple(text):
    return tuple(math.radians(float(p)) for p in str(text).split(",") if p.strip())


def _apply(section: str, items: dict, acc: dict):
    """Validate and convert one section's raw strings into ``acc`` buckets."""
    if section == "experiment":
        hints = {**_fields(ExperimentConfig, {"train"}),
                 "episodes": int, "steps_per_episode": int, "lr_actor": float, "lr_critic": float}
        for k, v in items.items():
            if k not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key [experiment] {k}")
            target = "train" if k in ("episodes", "steps_per_episode", "lr_actor", "lr_critic") else "experiment"
            acc[target][k] = _coerce(v, hints[k], k)
    elif section == "scenario":
        hints = _fields(ScenarioConfig, _SCENARIO_SKIP)
        for k, v in items.items():
            if k == "target_angles_deg":
                acc["scenario"]["target_angles"] = _deg_tuple(v)
            elif k in ("Delta_deg", "grid_res_deg"):
                acc["scenario"][k[:-4]] = math.radians(float(v))
            elif k in hints:
                acc["scenario"][k] = _coerce(v, hints[k], k)
            else:
                raise ConfigError(f"unknown key [scenario] {k}")
    elif section == "channel":
        hints = _fields(ChannelConfig, _CHANNEL_SKIP)
        for k, v in items.items():
            if k == "user_angles_deg":
                acc["channel"]["user_angles"] = _deg_tuple(v)
            elif k == "user_jitter_deg":
                acc["channel"]["user_jitter"] = math.radians(float(v))
            elif k in hints:
                acc["channel"][k] = _coerce(v, hints[k], k)
            else:
                raise ConfigError(f"unknown key [channel] {k}")
    elif section == "ppo":
        hints = _fields(PpoConfig)
        for k, v in items.items():
            if k not in hints:
                raise ConfigError(f"unknown key [ppo] {k}")
            acc["ppo"][k] = _coerce(v, hints[k], k)
    elif section == "runtime":
        hints = _fields(TrainConfig)
        for k, v in items.items():
            if k not in _RUNTIME_KEYS:
                raise ConfigError(f"unknown key [runtime] {k}")
            acc["train"][k] = _coerce(v, hints[k], k)
    elif section == "primal_dual":
        hints = _fields(TrainConfig)
        for k, v in items.items():
            if k not in _PD_KEYS:
                raise ConfigError(f"unknown key [primal_dual] {k}")
            name = _PD_KEYS[k]
            hint = tuple[float, ...] if name in ("tau", "alpha") else hints[name]
            acc["train"][name] = _coerce(v, hint, k)
    else:
        raise ConfigError(f"unknown section [{section}]")


def _preset_layer(name: str, acc: dict):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    for section, values in PRESETS[name].items():
        _apply(section, {k: ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
                         for k, v in values.items()}, acc)


def load_config(path=None, preset: str | None = None, text: str | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Materialize an ExperimentConfig.

    Layers, later wins: dataclass defaults, preset (from the argument or the
    file's ``[experiment] preset``), file values, ``overrides`` (a dict of
    section -> {key: string}).
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keys are case-sensitive (M, K, N, P_max)
    try:
        if path is not None:
            with open(path) as fh:
                parser.read_file(fh)
        elif text is not None:
            parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    sections = {s: dict(parser.items(s, raw=True)) for s in parser.sections()}
    for s, items in (overrides or {}).items():
        sections.setdefault(s, {}).update({k: str(v) for k, v in items.items()})

    chosen = preset or sections.get("experiment", {}).get("preset")
    acc = {k: {} for k in ("experiment", "train", "scenario", "channel", "ppo")}
    if chosen:
        _preset_layer(chosen.strip(), acc)
    for s, items in sections.items():
        _apply(s, items, acc)
    if chosen:
        acc["experiment"]["preset"] = chosen.strip()

    try:
        channel = ChannelConfig(**acc["channel"])
        scenario = ScenarioConfig(channel=channel, **acc["scenario"])
        ppo = PpoConfig(**acc["ppo"])
        train = TrainConfig(scenario=scenario, ppo=ppo, **acc["train"])
        cfg = ExperimentConfig(train=train, **acc["experiment"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.algo in ("dppo_pd", "a3c") and "workers" not in acc["train"]:
        cfg.train.workers = cfg.train.scenario.K
    log.info("configuration: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that ``load_config`` maps back onto the same configuration."""
    t, sc, ch, p = cfg.train, cfg.train.scenario, cfg.train.scenario.channel, cfg.train.ppo

    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ",".join(fmt(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return "none" if v is None else str(v)

    def deg(v):
        return repr(math.degrees(v))

    out = configparser.ConfigParser(interpolation=None)
    out.optionxform = str
    out["experiment"] = {
        "algo": cfg.algo, "episodes": fmt(t.episodes), "steps_per_episode": fmt(t.steps_per_episode),
        "seeds": fmt(cfg.seeds), "ma_window": fmt(cfg.ma_window), "lr_actor": fmt(t.lr_actor),
        "lr_critic": fmt(t.lr_critic), "eval_channels": fmt(cfg.eval_channels),
        "power_dbm": fmt(cfg.power_dbm), "elements": fmt(cfg.elements),
    }
    scen = {k: fmt(getattr(sc, k)) for k in _fields(ScenarioConfig, _SCENARIO_SKIP)}
    scen["target_angles_deg"] = ",".join(deg(a) for a in sc.target_angles)
    scen["Delta_deg"] = deg(sc.Delta)
    scen["grid_res_deg"] = deg(sc.grid_res)
    out["scenario"] = scen
    chan = {k: fmt(getattr(ch, k)) for k in _fields(ChannelConfig, _CHANNEL_SKIP)}
    chan["user_angles_deg"] = ",".join(deg(a) for a in ch.user_angles)
    chan["user_jitter_deg"] = deg(ch.user_jitter)
    out["channel"] = chan
    out["ppo"] = {k: fmt(getattr(p, k)) for k in _fields(PpoConfig)}
    out["runtime"] = {k: fmt(getattr(t, k)) for k in sorted(_RUNTIME_KEYS)}
    out["primal_dual"] = {k: fmt(getattr(t, v)) for k, v in _PD_KEYS.items()}
    buf = io.StringIO()
    out.write(buf)
    return buf.getvalue()
