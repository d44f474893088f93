"""Simulated asynchronous fixed-point iterations with snapshot-based convergence detection."""

from .core import (BlockVector, DeltaCoeffs, FixedPointMap, LinearMap, NormSpec,
                   StructureError, UnsupportedMapError, adjusted_threshold, delta_coeffs,
                   mixed_residual, norm, residual)
from .engine import Schedule
from .runner import RunConfig, RunResult, Simulation, simulate, sync_config, thresholds
from .simnet import ChannelPolicy, DelayModel, Message, Network, ProtocolMisuse

__version__ = "0.1.0"
