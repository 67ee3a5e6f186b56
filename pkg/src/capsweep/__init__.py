"""Power-cap sweeps, telemetry and tuning for RAPL-capped Linux servers."""

from capsweep.errors import CapsweepError, PreconditionError

__version__ = "0.1.0"

__all__ = ["CapsweepError", "PreconditionError", "__version__"]
