"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class FunnelMPCError(Exception):
    """Base class for all errors raised by this package."""


class IntegrationDivergedError(FunnelMPCError):
    """A non-finite state appeared during fixed-step integration."""

    def __init__(self, last_finite_time: float, message: str | None = None):
        self.last_finite_time = float(last_finite_time)
        super().__init__(
            message or f"integration diverged after t={self.last_finite_time:.6g}"
        )


class RankDeficiencyError(FunnelMPCError, ValueError):
    """A matrix that must have full row or column rank does not."""


class InvalidFunnelError(FunnelMPCError, ValueError):
    """Funnel parameters outside the admissible class (positive infimum)."""


class InvalidActivationError(FunnelMPCError, ValueError):
    pass


class InvalidPlantError(FunnelMPCError, ValueError):
    pass


class InvalidModelError(FunnelMPCError, ValueError):
    pass


class PlantDomainError(FunnelMPCError):
    """The plant state left the domain where its vector field is defined."""


class MissingTransformError(FunnelMPCError):
    """An output-reset initialization was requested for a model without a BIF map."""


class InfeasibleStartError(FunnelMPCError):
    """The OCP initial output is not strictly inside the funnel."""


class OcpInfeasibleError(FunnelMPCError):
    """No finite-cost control was found for the OCP."""


class FunnelViolationError(FunnelMPCError):
    """The model-plant mismatch reached the adaptive funnel boundary."""


class ConfigError(FunnelMPCError, ValueError):
    """Invalid scenario configuration; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


class ClosedLoopError(FunnelMPCError):
    """Wraps a failure inside the closed loop with the failing cycle and partial log."""

    def __init__(self, cause: Exception, t_k: float, log):
        self.cause = cause
        self.t_k = float(t_k)
        self.log = log
        super().__init__(f"closed loop failed at t_k={self.t_k:.6g}: {cause}")
