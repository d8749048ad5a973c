"""Exception types raised across mixlab."""


class MixlabError(Exception):
    """Base class for all toolkit errors."""


class FormatError(MixlabError):
    """A file does not match its declared binary format."""


class ShapeError(MixlabError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class DuplicatePointError(MixlabError, ValueError):
    """Two points of a cloud coincide, so a nearest-neighbour ratio is undefined."""

    def __init__(self, i: int, j: int):
        super().__init__(f"duplicate points at indices {i} and {j}")
        self.indices = (i, j)


class DegenerateSampleError(MixlabError, ValueError):
    """No usable neighbour ratios remain for estimation."""


class TrainingError(MixlabError, RuntimeError):
    """Training diverged."""


class ConfigError(MixlabError, ValueError):
    """A run configuration is invalid."""
