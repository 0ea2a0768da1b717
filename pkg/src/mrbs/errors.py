"""Exception types raised across the package."""


class MRBSError(Exception):
    """Base class for all errors raised by mrbs."""


class NonPositiveDifferentialInductance(MRBSError):
    pass


class LengthMismatch(MRBSError, ValueError):
    pass


class IndexOutOfRange(MRBSError, IndexError):
    pass


class InconsistentState(MRBSError):
    """Bridge-state pair contradicts the sign of the energy-transfer index."""


class InvalidIndices(MRBSError, ValueError):
    """Modulation indices fall outside the feasible duration region."""


class InconsistentTopology(MRBSError):
    pass


class TripLimitExceeded(MRBSError):
    def __init__(self, message, t=None, group=None, current=None):
        super().__init__(message)
        self.t = t
        self.group = group
        self.current = current


class NonFiniteState(MRBSError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class DegenerateDenominator(MRBSError, ZeroDivisionError):
    pass


class DemandExceedsCapability(MRBSError, ValueError):
    pass


class ParseError(MRBSError):
    pass


class ValidationError(MRBSError, ValueError):
    """Configuration failed validation.

    ``problems`` lists every violated invariant as ``(field_path, message)``.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"{path}: {msg}" for path, msg in self.problems]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))
