"""Exception hierarchy shared across the package."""


class SegloopError(Exception):
    """Base class for all package errors."""


class DimensionError(SegloopError, ValueError):
    """Two masks (or a mask and a scene) have different sizes."""


class EmptyDatasetError(SegloopError, ValueError):
    pass


class SceneGenError(SegloopError):
    """Region packing failed after the retry budget was spent."""


class PromptError(SegloopError, ValueError):
    pass


class ViewError(SegloopError, ValueError):
    pass


class ConfigError(SegloopError, ValueError):
    pass


class EpisodeClosedError(SegloopError):
    pass


class GtEmptyError(SegloopError, ValueError):
    pass


class ShapeError(SegloopError, ValueError):
    pass


class TrainingError(SegloopError):
    """Loss or gradient became non-finite."""


class RescueError(SegloopError, ValueError):
    pass


class ScoreError(SegloopError, ValueError):
    """A trajectory log could not be parsed for scoring."""


class ProtocolError(SegloopError):
    """The external policy broke the wire protocol beyond recovery."""
