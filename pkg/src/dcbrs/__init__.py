"""Replay-memory policies for class-incremental continual learning.

Reservoir sampling, class-balancing reservoir sampling (CBRS) and its
diversity-aware variant (D-CBRS), plus the stream simulation, MLP training
and experiment harness used to compare them.
"""

from .core import Batch, Instance, MemoryBuffer, MemoryStateError
from .samplers import (CBRSPolicy, ConfigurationError, DCBRSPolicy, MemoryEvent, PolicyKind,
                       ReservoirPolicy, make_policy)

__all__ = ["Batch", "Instance", "MemoryBuffer", "MemoryStateError", "CBRSPolicy",
           "ConfigurationError", "DCBRSPolicy", "MemoryEvent", "PolicyKind", "ReservoirPolicy",
           "make_policy"]
__version__ = "0.1.0"
