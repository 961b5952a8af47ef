"""Error taxonomy shared across the package.

Every error the CLI can surface carries a short machine-parsable
category; `cli.main` prints ``error:<category>: <message>`` and exits
nonzero.
"""


class MapGraphError(Exception):
    """Base class for package errors."""

    category = "internal"


class ConfigError(MapGraphError):
    category = "config"


class DataError(MapGraphError):
    category = "data"


class CheckpointError(MapGraphError):
    category = "checkpoint"


class ShapeError(MapGraphError):
    category = "shape"


class NumericError(MapGraphError):
    """Raised when a computation produces NaN/Inf or diverges."""

    category = "numeric"
