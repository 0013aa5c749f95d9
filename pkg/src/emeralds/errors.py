"""Exception types raised across the toolkit.

Every error derives from :class:`EmeraldsError`; most also derive from
``ValueError`` so callers that only care about bad input can catch that.
"""


class EmeraldsError(Exception):
    """Base class for all toolkit errors."""


# volume_io

class MissingKey(EmeraldsError, ValueError):
    def __init__(self, key):
        super().__init__(f"missing required MetaImage key: {key}")
        self.key = key


class UnsupportedElementType(EmeraldsError, ValueError):
    def __init__(self, element_type):
        super().__init__(f"unsupported ElementType: {element_type}")
        self.element_type = element_type


class MalformedLine(EmeraldsError, ValueError):
    def __init__(self, line_no, line=""):
        super().__init__(f"malformed header line {line_no}: {line!r}")
        self.line_no = line_no


class PayloadSizeMismatch(EmeraldsError, ValueError):
    def __init__(self, expected, actual):
        super().__init__(f"payload has {actual} bytes, expected {expected}")
        self.expected = expected
        self.actual = actual


class InvalidWindow(EmeraldsError, ValueError):
    pass


class OutOfBounds(EmeraldsError, IndexError):
    def __init__(self, axis, index, size):
        super().__init__(f"index {index} outside [0, {size}) on axis {axis}")
        self.axis = axis
        self.index = index


# annotation_store

class BadRow(EmeraldsError, ValueError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class ScoreOutOfRange(EmeraldsError, ValueError):
    def __init__(self, field, value):
        super().__init__(f"{field}={value} is outside its allowed range")
        self.field = field
        self.value = value


class KOutOfRange(EmeraldsError, ValueError):
    pass


# emr_synth

class CohortTooSmall(EmeraldsError, ValueError):
    pass


# metrics_losses

class ShapeMismatch(EmeraldsError, ValueError):
    pass


class LengthMismatch(EmeraldsError, ValueError):
    pass


class NotADistribution(EmeraldsError, ValueError):
    pass


class EmptyDenominator(EmeraldsError, ZeroDivisionError):
    pass


class OneClassOnly(EmeraldsError, ValueError):
    pass


# fusion_core

class ZeroVector(EmeraldsError, ValueError):
    pass


class DimensionMismatch(EmeraldsError, ValueError):
    pass


class MissingClass(EmeraldsError, ValueError):
    pass


class BackendUnavailable(EmeraldsError, RuntimeError):
    pass


class MalformedResponse(EmeraldsError, ValueError):
    pass


# learners

class DegenerateFeatures(EmeraldsError, ValueError):
    pass


class SchemaMismatch(EmeraldsError, ValueError):
    pass


class TooFewSamples(EmeraldsError, ValueError):
    pass


# cli

class ConfigError(EmeraldsError, ValueError):
    pass


class NoOverlapInInputs(EmeraldsError, ValueError):
    pass


class MissingRocPoints(EmeraldsError, ValueError):
    pass
