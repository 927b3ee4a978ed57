"""Exception types raised across the package."""


class GroundingError(Exception):
    """Base class for all package errors."""


class InvalidSpanError(GroundingError, ValueError):
    pass


class ConfigurationError(GroundingError, ValueError):
    pass


class InvalidCostError(GroundingError, ValueError):
    pass


class DegenerateFeatureError(GroundingError, ValueError):
    pass


class SequenceTooShortError(GroundingError, ValueError):
    pass


class FeatureFormatError(GroundingError, ValueError):
    """Bad magic bytes or malformed header in a feature file."""


class FeatureLengthError(GroundingError, ValueError):
    """Payload length disagrees with the header."""


class DatasetSchemaError(GroundingError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class SpanValidationError(DatasetSchemaError):
    pass


class MissingFeatureError(GroundingError, FileNotFoundError):
    def __init__(self, vid, path):
        self.vid = vid
        self.path = path
        super().__init__(f"feature file for vid '{vid}' not found: {path}")


class TrainingDivergenceError(GroundingError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CheckpointVersionError(GroundingError, ValueError):
    pass
