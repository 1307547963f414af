"""Exception hierarchy. Everything derives from ValueError so callers can catch broadly."""


class MalignError(ValueError):
    pass


class ShapeError(MalignError):
    pass


class ConfigError(MalignError):
    pass


class DivergenceError(MalignError):
    """Raised when a loss or gradient becomes non-finite."""


class DatasetError(MalignError):
    pass


class HeaderError(DatasetError):
    pass


class LengthMismatchError(DatasetError):
    pass


class RowWidthError(DatasetError):
    pass


class ContainerError(MalignError):
    """Base for checkpoint / perturbation container problems."""


class BadMagicError(ContainerError):
    pass


class TruncatedBlobError(ContainerError):
    pass


class ManifestShapeError(ContainerError):
    pass


class StageError(MalignError):
    """A pipeline stage failed; the message names the stage."""
