"""
Error hierarchy. Every error carries a short `code` string; the CLI maps the two
families to exit codes (DataError -> 2, NumericalError -> 3, ConfigError -> 1).
"""


class USBLError(Exception):
    code = "usbl"


class ConfigError(USBLError, ValueError):
    code = "config"


class DataError(USBLError, ValueError):
    code = "data"


class NumericalError(USBLError, ArithmeticError):
    code = "numerical"


# tensor files and manifests
class BadMagic(DataError):
    code = "bad-magic"


class DtypeMismatch(DataError):
    code = "dtype-mismatch"


class TruncatedPayload(DataError):
    code = "truncated-payload"


class MissingFile(DataError):
    code = "missing-file"


class ShapeMismatch(DataError):
    code = "shape-mismatch"


class LabelMissing(DataError):
    code = "label-missing"


class ConditionLengthMismatch(DataError):
    code = "condition-length-mismatch"


class MissingCondition(DataError):
    code = "missing-condition"


class ModalityMismatch(DataError):
    code = "modality-mismatch"


class ZeroVariance(DataError):
    code = "zero-variance"

    def __init__(self, modality, channel):
        super().__init__(f"modality {modality!r}: channel {channel} has zero pooled variance")
        self.modality = modality
        self.channel = channel


# priors / lead field
class DomainError(DataError):
    code = "domain"


class ZeroRow(DataError):
    code = "zero-row"


class DegenerateGeometry(DataError):
    code = "degenerate-geometry"


class InsufficientSamples(DataError):
    code = "insufficient-samples"


# cross-validation and baselines
class StratificationFailure(DataError):
    code = "stratification-failure"


class OneConditionOnly(DataError):
    code = "one-condition-only"


class DegenerateRT(DataError):
    code = "degenerate-rt"


class WindowOutOfRange(DataError):
    code = "window-out-of-range"


class UndefinedMetric(DataError):
    code = "undefined-metric"


# numerics
class NotPositiveDefinite(NumericalError):
    code = "not-positive-definite"


class NonFiniteError(NumericalError):
    code = "non-finite"

    def __init__(self, term, step=None, message=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(message or f"non-finite value in term {term!r}{where}")
        self.term = term
        self.step = step


class UnsupportedVersion(DataError):
    code = "unsupported-version"
