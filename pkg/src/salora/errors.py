"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its one-line failure message.
"""


class SaloraError(Exception):
    category = "error"


class ShapeError(SaloraError, ValueError):
    category = "shape"


class RankError(SaloraError, ValueError):
    category = "rank"


class ValidationError(SaloraError, ValueError):
    category = "validation"


class ConfigurationError(SaloraError):
    category = "config"


class FormatError(SaloraError):
    category = "format"
