"""Exception types shared across the package."""


class SkillCilError(Exception):
    """Base class for all package errors."""


class InvalidTaskError(SkillCilError):
    """Task references unknown objects or repeats a sub-goal."""


class EpisodeFinishedError(SkillCilError):
    """step() called on a finished episode."""


class DemoGenerationError(SkillCilError):
    """Scripted expert failed to complete the task within the horizon."""


class DimensionError(SkillCilError):
    """Array shapes do not chain."""


class EmptyBatchError(SkillCilError):
    """A training batch was empty."""


class DegenerateInputError(SkillCilError):
    """Input vector collapses to zero before normalization."""


class NoSkillError(SkillCilError):
    """Retrieval requested from an empty prototype memory."""


class SkillConflictError(SkillCilError):
    """A skill id was added twice."""


class EmptyStageError(SkillCilError):
    """A learning stage carried no retained transitions."""


class NumericFailureError(SkillCilError):
    """Training produced NaN/Inf."""


class IncompleteScoreMatrixError(SkillCilError):
    """A required (task, stage) score is missing."""


class ConfigError(SkillCilError):
    """Run configuration is inconsistent."""
