"""Exception hierarchy shared across the package.

Three broad categories map onto CLI exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4. Everything else is a programming
error and surfaces as a plain traceback.
"""


class HygrecError(Exception):
    pass


class ConfigError(HygrecError):
    pass


class DataError(HygrecError):
    pass


class NumericError(HygrecError):
    pass


# hypergraph construction
class EmptyHyperedge(DataError):
    pass


class NodeIdOutOfRange(DataError):
    pass


# corpus ingestion
class ParseError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class InvariantViolation(DataError):
    pass


class UnknownSeed(DataError):
    pass


class EmptySession(DataError):
    pass


# dense kernels / autodiff
class ShapeMismatch(HygrecError):
    pass


class HeadDivisibility(HygrecError):
    pass


class EmptySelection(HygrecError):
    pass


class DisconnectedLoss(HygrecError):
    pass


# contrastive losses
class BatchTooSmall(HygrecError):
    pass


class ZeroVector(NumericError):
    pass


class NoMentions(HygrecError):
    pass


# recommendation
class MissingView(ConfigError):
    pass


class LabelOutOfRange(DataError):
    pass


class KTooLarge(ConfigError):
    pass


class MissingGroundTruth(DataError):
    pass


# response decoding
class EmptyVocabulary(DataError):
    pass


class TargetOutOfRange(DataError):
    pass


class NGramTooLong(ConfigError):
    pass


# fairness metrics
class UnknownItem(DataError):
    pass


class EmptyProfile(DataError):
    pass


class EmptyLists(DataError):
    pass


# training
class NonFiniteLoss(NumericError):
    pass
