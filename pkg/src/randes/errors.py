"""Exception hierarchy shared by every randes module."""


class RandesError(Exception):
    """Base class for all library errors."""


class StructuralMismatchError(RandesError):
    """Two tensor maps (or a map and a transform) disagree on names or shapes."""


class DegenerateInputError(RandesError):
    pass


class SchemaError(RandesError):
    pass


class InvalidSpecError(RandesError):
    pass


class NumericalDegeneracyError(RandesError):
    pass


class IntegrityError(RandesError):
    """Hash or norm check failed: the inputs are not the ones the store was built from."""


class FormatError(RandesError):
    """Unreadable checkpoint or manifest (bad magic, version, header)."""


class UnknownTaskError(RandesError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class DuplicateTaskError(RandesError):
    pass


class ConfigError(RandesError):
    pass
