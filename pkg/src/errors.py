"""Exception hierarchy shared by every component of the exploration workbench."""


class ExplorationError(Exception):
    """Base class for all workbench errors."""


class ConfigError(ExplorationError):
    """Invalid or contradictory settings."""


class MapFormatError(ExplorationError):
    """Malformed map file."""


class MapGenerationError(ExplorationError):
    """Procedural map generation failed after all retries."""


class UnsatisfiableSpawnError(ExplorationError):
    """No free region admits the spawn constraint."""


class InvalidSourceError(ExplorationError):
    """A distance-field source lies on an obstacle or outside the grid."""


class NoPathError(ExplorationError):
    """Two cells are not connected through free space."""


class ShapeError(ExplorationError):
    """Tensor shapes are incompatible."""


class UndefinedSimilarityError(ExplorationError):
    """Cosine similarity requested for a zero vector."""


class TrainingDivergenceError(ExplorationError):
    """A loss or gradient became non-finite."""


class ExplorationComplete(ExplorationError):
    """No goal candidate (active ghost or frontier) remains."""


class GoalUnreachableError(ExplorationError):
    """The local planner cannot reach the goal even optimistically."""


class EpisodeStepError(ExplorationError):
    """A component failed inside an episode; carries seed and step context."""

    def __init__(self, message, seed=None, step=None):
        self.seed = seed
        self.step = step
        context = []
        if seed is not None:
            context.append(f"seed={seed}")
        if step is not None:
            context.append(f"step={step}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
