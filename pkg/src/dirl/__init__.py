"""Dirichlet-policy REINFORCE for characteristics-based portfolio allocation."""

from .errors import DirlError
from .market import FactorModelSpec, FeaturePanel, MarketDataset, ReturnSlice
from .policy import PolicyParams
from .reinforce import BacktestReport, LearnConfig
from .rewards import RewardConfig
from .special_math import Concentration, ConcentrationBounds

__version__ = "0.1.0"

__all__ = [
    "BacktestReport",
    "Concentration",
    "ConcentrationBounds",
    "DirlError",
    "FactorModelSpec",
    "FeaturePanel",
    "LearnConfig",
    "MarketDataset",
    "PolicyParams",
    "ReturnSlice",
    "RewardConfig",
]
