"""Exception hierarchy for ncenet."""


class NCENetError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(NCENetError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class InvalidTemperature(ConfigError):
    pass


class ShapeMismatch(NCENetError, ValueError):
    pass


class ZeroRowError(NCENetError, ValueError):
    pass


class NonScalarOutput(NCENetError, ValueError):
    pass


class NoLabelledInstances(NCENetError, ValueError):
    pass


class BatchTooSmall(NCENetError, ValueError):
    pass


class KTooLarge(NCENetError, ValueError):
    pass


class EmptyNeighborList(NCENetError, ValueError):
    pass


class StepOutOfRange(NCENetError, ValueError):
    pass


class EmptyStream(NCENetError, ValueError):
    pass


class TeacherShapeMismatch(ShapeMismatch):
    pass


class LengthMismatch(NCENetError, ValueError):
    pass


class EmptyInput(NCENetError, ValueError):
    pass


class FormatError(NCENetError, ValueError):
    pass


class InvariantViolation(NCENetError, ValueError):
    pass


class SchemaMismatch(NCENetError, ValueError):
    pass


class HashMismatch(NCENetError, ValueError):
    pass
