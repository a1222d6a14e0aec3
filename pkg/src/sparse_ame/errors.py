"""Exception hierarchy shared by every module."""


class AmeError(Exception):
    """Base class; the CLI maps it to a structured message and exit code."""

    exit_code = 3


class ConfigError(AmeError):
    exit_code = 2


class InvalidGrid(ConfigError):
    pass


class InvalidEpsilon(ConfigError):
    pass


class InvalidBetaParams(ConfigError):
    pass


class EmptySources(ConfigError):
    pass


class InvalidConfig(ConfigError):
    """Carries every violation found while validating an experiment."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


class MalformedRecord(AmeError):
    pass


class StoreCorrupt(AmeError):
    pass


class InconsistentN(AmeError):
    pass


class MissingKnockoffMask(AmeError):
    pass


class MissingKnockoffs(AmeError):
    pass


class NonFinite(AmeError):
    pass


class TooFewRows(AmeError):
    pass


class TooLarge(AmeError):
    pass


class UnsupportedDistribution(AmeError):
    pass


class InfiniteNormalizer(ConfigError):
    """E[1/(p(1-p))] diverges for the requested law."""


class UnsupportedDepth(ConfigError):
    """Hierarchies deeper than two levels are parsed but not estimated."""
