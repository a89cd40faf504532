"""Exception taxonomy shared by all agrisim modules.

Every domain failure raises a subclass of AgrisimError so the CLI can map
domain errors to exit code 1 and config/usage problems to exit code 2.
"""


class AgrisimError(Exception):
    """Base class for all domain errors."""


class ConfigError(AgrisimError):
    """Invalid scenario/configuration input (CLI exit code 2)."""


class InvalidSpecError(AgrisimError):
    """Field specification violates its invariants."""


class UndefinedIndexError(AgrisimError):
    """Spectral index undefined for the given inputs (zero denominator)."""


class NoPatternError(AgrisimError):
    """Pattern detection got an empty or degenerate feature grid."""


class ContractViolationError(AgrisimError):
    """A caller-supplied matrix/vector violates a documented contract."""


class DanglingConstraintError(AgrisimError):
    """A pose-graph constraint references a node that does not exist."""


class GaugeFreedomError(AgrisimError):
    """Pose-graph window has no prior and no anchored node."""


class OrderingError(AgrisimError):
    """Non-monotonic timestamps passed to the sliding window."""


class NoFlowError(AgrisimError):
    """Flow matching received a grid with no valid cells."""


class RegistrationUnreliableError(AgrisimError):
    """Registration cannot produce a trustworthy transform."""


class RankDeficiencyError(AgrisimError):
    """Degenerate (coplanar or too few) correspondences for affine fitting."""


class InsufficientStructureError(AgrisimError):
    """Too few stems to build or match temporal descriptors."""


class InvalidObservationError(AgrisimError):
    """Sensor pose outside the configured altitude limits."""


class ExhaustedWorkspaceError(AgrisimError):
    """Planner found no feasible waypoint inside the workspace."""


class NotReachableError(AgrisimError):
    """Target weed is already behind the selected tool rank."""


class OutOfReachError(AgrisimError):
    """Lateral miss distance exceeds what the tool can cover."""


class StructuralError(AgrisimError):
    """Malformed task tree."""


class TimeoutError_(AgrisimError):
    """Reliable message exchange exceeded its deadline."""
