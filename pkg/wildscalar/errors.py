"""Exception hierarchy for the construction kit."""


class WildScalarError(Exception):
    """Base class for every domain error raised by the package."""


# ═══ symbols ═══

class SymbolError(WildScalarError):
    pass


class SingularFrequency(SymbolError):
    pass


class ZeroFrequency(SymbolError):
    pass


class UnknownSymbol(SymbolError):
    pass


class NoRegularPoints(SymbolError):
    pass


class MissingPatches(SymbolError):
    """No patch centers configured and no default pair for the symbol."""


class DimensionMismatch(SymbolError):
    pass


# ═══ fields ═══

class FieldError(WildScalarError):
    pass


class ShapeMismatch(FieldError):
    pass


class SingularSupport(FieldError):
    pass


class GridMismatch(FieldError):
    pass


class FieldFormatError(FieldError):
    pass


# ═══ waves ═══

class WaveError(WildScalarError):
    pass


class TruncationSearchExhausted(WaveError):
    pass


class GridOverflow(WaveError):
    pass


class DegenerateDirection(WaveError):
    pass


class PropertyFailure(WaveError):
    """A measured wave property missed its bound.

    `which` names the property, `measured` and `bound` carry the numbers so a
    caller can decide whether refining δ is worth it.
    """

    def __init__(self, which, measured, bound):
        self.which = which
        self.measured = measured
        self.bound = bound
        super().__init__(f"{which}: measured {measured:.6g} vs bound {bound:.6g}")


# ═══ geometry ═══

class GeometryError(WildScalarError):
    pass


class DegenerateTheta(GeometryError):
    pass


class TransversalityFailure(GeometryError):
    pass


class SpanFailure(GeometryError):
    pass


class OutsideBall(GeometryError):
    pass


class NoIntersection(GeometryError):
    pass


class WeightOutOfRange(GeometryError):
    pass


class EtaTooLarge(GeometryError):
    pass


class NotInCone(GeometryError):
    """A state difference has no wave-cone direction inside the configured patches."""


class NoWitness(GeometryError):
    """A state has no decomposition tA″ + (1−t)T_j(A″) with A″ in the certified ball."""


# ═══ integrator ═══

class IntegratorError(WildScalarError):
    pass


class CascadeDegenerate(IntegratorError):
    pass


class CoverFailure(IntegratorError):
    pass


class StageFailure(IntegratorError):
    """A stage missed its measured energy-gain bound."""


class UsageError(WildScalarError):
    pass
