"""Exception hierarchy.

Every error maps to one of three CLI exit codes: configuration problems (2),
data problems (3) and numerical failures (4).
"""


class DrivebyError(Exception):
    exit_code = 1


class ConfigError(DrivebyError):
    exit_code = 2


class DataError(DrivebyError):
    exit_code = 3


class NumericalError(DrivebyError):
    exit_code = 4


# configuration
class ConfigInvalid(ConfigError):
    pass


class InvalidOverlap(ConfigError, ValueError):
    pass


class InvalidLength(ConfigError, ValueError):
    pass


class BandOutsideGrid(ConfigError, ValueError):
    pass


class SetSizeTooLarge(ConfigError, ValueError):
    pass


# data
class RecordTooShort(DataError, ValueError):
    pass


class GridMismatch(DataError, ValueError):
    pass


class HeterogeneousSamples(DataError, ValueError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class SequenceTooShort(DataError, ValueError):
    pass


class TooFewSamples(DataError, ValueError):
    pass


class EmptyBatch(DataError, ValueError):
    pass


class BundleCorrupt(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class IoFailure(DataError, OSError):
    pass


class VehicleFasterThanBeam(DataError, ValueError):
    pass


# numerical
class NonHermitianInput(NumericalError, ValueError):
    pass


class NoPeakInBand(NumericalError):
    pass


class DegenerateRange(NumericalError, ValueError):
    pass


class UnstableTimestep(NumericalError, ValueError):
    pass
