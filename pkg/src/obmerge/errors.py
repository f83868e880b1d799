"""Exception types shared across the toolkit.

The CLI maps exceptions to exit codes through ``exit_code``: validation
problems (bad recipes, mismatched shapes, empty calibration sets) exit
with 2, everything else with 1.
"""


class ObmergeError(Exception):
    exit_code = 1


class ValidationError(ObmergeError):
    exit_code = 2


class ContainerError(ObmergeError):
    """Malformed or unreadable checkpoint container."""


class ShapeMismatch(ValidationError):
    """Two tensors that must be shape-compatible are not."""


class FingerprintMismatch(ValidationError):
    """A task vector does not belong to the checkpoint it is applied to."""


class StatsError(ObmergeError):
    """Missing or inconsistent activation statistics."""


class MergeError(ObmergeError):
    """A merge pipeline stage received inconsistent inputs."""


class RecipeError(ValidationError):
    """One or more recipe validation failures, each tagged with its field path."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))
