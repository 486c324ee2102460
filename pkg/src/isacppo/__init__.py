"""Primal-dual PPO / DPPO workbench for IRS-aided THz ISAC beamforming."""

from .channel import ChannelConfig, ChannelSet, PropagationParams, synthesize_channels
from .env import ScenarioConfig, beampattern_mse, effective_channel, env_step, power_projection
from .dppo import TrainConfig, run_training_dppo, run_training_miso
from .policy import PpoConfig

__all__ = [
    "ChannelConfig", "ChannelSet", "PropagationParams", "synthesize_channels",
    "ScenarioConfig", "beampattern_mse", "effective_channel", "env_step", "power_projection",
    "TrainConfig", "run_training_dppo", "run_training_miso", "PpoConfig",
]
