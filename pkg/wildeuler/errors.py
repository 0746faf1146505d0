"""
Exception hierarchy for wildeuler
"""


class WildEulerError(Exception):
    """Base exception for wildeuler errors"""
    pass


class ConfigError(WildEulerError):
    """Invalid run configuration; carries the field-level messages"""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("Invalid configuration:\n  " + "\n  ".join(self.messages))


class GridError(WildEulerError):
    """Bad grid specification or mismatched grids"""
    pass


class FieldDumpError(WildEulerError):
    """Malformed field dump"""
    pass


class GeometryError(WildEulerError):
    """Precondition violation in pointwise geometry"""
    pass


class DecompositionError(GeometryError):
    """Hull decomposition did not terminate within the depth limit"""
    pass


class SubsolutionError(WildEulerError):
    """Subsolution construction failure"""
    pass


class CoverError(WildEulerError):
    """Cover condition unattainable at the requested radius"""
    pass


class ImprovementError(WildEulerError):
    """No admissible frequency or no ball accepted"""
    pass


class AdmissibilityError(WildEulerError):
    """Admissibility precondition violated"""
    pass


class InvariantError(WildEulerError):
    """A certified invariant failed"""

    def __init__(self, invariant: str, value: float, tolerance: float):
        self.invariant = invariant
        self.value = value
        self.tolerance = tolerance
        super().__init__(f"Invariant '{invariant}' failed: {value:.3e} (tolerance {tolerance:.1e})")
