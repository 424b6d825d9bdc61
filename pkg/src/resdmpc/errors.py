"""Exception types raised across the package."""


class ResdmpcError(Exception):
    """Base class for all package errors."""


class IntegrationDiverged(ResdmpcError):
    pass


class MissingNeighborData(ResdmpcError):
    pass


class SocOutOfRange(ResdmpcError):
    pass


class InfeasibleChargePower(ResdmpcError):
    pass


class DerivativeFailure(ResdmpcError):
    pass


class IdentificationFailed(ResdmpcError):
    pass


class TreeTooLarge(ResdmpcError):
    pass


class AssemblyError(ResdmpcError):
    pass


class TopologyViolation(ResdmpcError):
    pass


class ConfigError(ResdmpcError):
    pass
