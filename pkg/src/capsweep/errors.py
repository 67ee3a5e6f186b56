"""Exception hierarchy shared by all capsweep modules."""

from __future__ import annotations


class CapsweepError(Exception):
    """Base class for every error raised by capsweep."""


class PreconditionError(CapsweepError, ValueError):
    """An argument violates the documented precondition of an operation."""


# -- powercap -----------------------------------------------------------------


class PowercapError(CapsweepError):
    """Base class for powercap sysfs errors."""


class ZoneNotFoundError(PowercapError, FileNotFoundError):
    """The powercap root (or a required zone file) does not exist."""


class ParseError(PowercapError, ValueError):
    """An attribute file holds content that is not a valid value."""

    def __init__(self, path, content: str) -> None:
        self.path = path
        self.content = content
        super().__init__(f"cannot parse {str(path)!r}: {content!r}")


class PowercapIOError(PowercapError, OSError):
    """An attribute file could not be read."""


class PartialWriteError(PowercapError):
    """A multi-file write stopped part way.

    ``succeeded`` lists the ``(path, value)`` pairs already written so the
    caller can roll them back.
    """

    def __init__(self, failed_path, succeeded, cause: BaseException) -> None:
        self.failed_path = failed_path
        self.succeeded = list(succeeded)
        self.cause = cause
        super().__init__(
            f"write to {str(failed_path)!r} failed after {len(self.succeeded)} "
            f"successful writes: {cause}"
        )


# -- telemetry ----------------------------------------------------------------


class SourceUnavailable(CapsweepError):
    def __init__(self, source: str, reason: str = "") -> None:
        self.source = source
        msg = source if not reason else f"{source}: {reason}"
        super().__init__(msg)


class SamplerStateError(CapsweepError):
    """Sampler used out of order (double stop, stop before start)."""


class UndefinedRatio(CapsweepError, ZeroDivisionError):
    """Ratio requested with a zero denominator."""


class EmptyDistribution(CapsweepError):
    """No frequency readings to summarise."""


# -- campaign -----------------------------------------------------------------


class HotplugError(CapsweepError):
    """Writing the online-cores attribute was rejected."""


class VerificationError(CapsweepError):
    """The online-cores mask read back differs from the one written."""


class WorkloadError(CapsweepError):
    """The workload cannot be resolved or launched."""


# -- analysis -----------------------------------------------------------------


class BaselineMissing(CapsweepError):
    """No successful run exists at the baseline cell."""


class NoCycleData(CapsweepError):
    """Too few caps carry cycle counters for a stall-ratio range."""


class Infeasible(CapsweepError):
    """No cell satisfies the performance-loss budget."""


# -- simulator ----------------------------------------------------------------


class DomainError(CapsweepError, ValueError):
    """Frequency or core count outside the modelled range."""


# -- tuner --------------------------------------------------------------------


class TuneAborted(CapsweepError):
    """An evaluation failed mid-search; ``partial`` holds what was measured."""

    def __init__(self, partial, cause: BaseException) -> None:
        self.partial = partial
        self.cause = cause
        super().__init__(f"search aborted after {len(partial.evaluations)} evaluations: {cause}")
