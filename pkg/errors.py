# errors.py


class SurvivalError(Exception):
    """Base class for every error raised by the toolkit"""
    default_message = 'Survival toolkit error'

    def __init__(self, message=None):
        if not message:
            message = self.default_message
        self.message = message
        super().__init__(message)


class DimensionError(SurvivalError):
    """Array operands have incompatible shapes"""
    default_message = 'Incompatible array shapes'

    @classmethod
    def for_shapes(cls, op, *shapes):
        described = ' and '.join(str(tuple(s)) for s in shapes)
        return cls(f'{op}: incompatible shapes {described}')


class ContractError(SurvivalError):
    """A precondition of an operation was violated by the caller"""
    default_message = 'Operation precondition violated'


class ConfigError(SurvivalError):
    """Configuration, manifest or generator spec is invalid"""
    default_message = 'Invalid configuration'


class ParseError(SurvivalError):
    """Input file does not conform to the CSV / sidecar schema"""
    default_message = 'Malformed input file'

    def __init__(self, message=None, path=None, row=None, column=None):
        self.path = path
        self.row = row
        self.column = column
        location = []
        if path is not None:
            location.append(str(path))
        if row is not None:
            location.append(f'row {row}')
        if column is not None:
            location.append(f'column {column!r}')
        text = message or self.default_message
        if location:
            text = f"{text} ({', '.join(location)})"
        super().__init__(text)


class NoEventsError(SurvivalError):
    """Partial likelihood is undefined without observed events"""
    default_message = 'no observed events in batch'


class UndefinedMetricError(SurvivalError):
    """A metric has no admissible pairs / horizons / cutoffs"""
    default_message = 'Metric is undefined for this input'
