"""Exception types shared across the package."""


class MeshTopologyError(Exception):
    """Inconsistent mesh connectivity (bad facet adjacency, broken chain, ...)."""


class MeshGeometryError(Exception):
    """Invalid geometry: inverted or degenerate elements, singular maps."""


class MeshTanglingError(MeshGeometryError):
    """Mesh motion produced a non-positive element area.

    Carries the index of the worst (most negative area) element and the
    offending area value.
    """

    def __init__(self, element, area, time=None):
        self.element = int(element)
        self.area = float(area)
        self.time = time
        msg = f"mesh tangling: element {element} has signed area {area:.3e}"
        if time is not None:
            msg += f" at t={time:.6g}"
        super().__init__(msg)


class InterfaceIntersectionError(MeshTopologyError):
    """The interface polyline became self-intersecting."""

    def __init__(self, seg_a, seg_b, time=None):
        self.segments = (int(seg_a), int(seg_b))
        self.time = time
        msg = f"interface self-intersection between segments {seg_a} and {seg_b}"
        if time is not None:
            msg += f" at t={time:.6g}"
        super().__init__(msg)


class SolverError(Exception):
    """Linear algebra failure (singular local block, factorization breakdown)."""


class NonconvergenceError(SolverError):
    """Nonlinear iteration failed to reach tolerance within the allowed steps."""

    def __init__(self, iterations, residual):
        self.iterations = int(iterations)
        self.residual = float(residual)
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(last update {residual:.3e})"
        )


class InstabilityError(Exception):
    """Blow-up detector tripped during time stepping."""

    def __init__(self, time, growth):
        self.time = float(time)
        self.growth = float(growth)
        super().__init__(
            f"solution blow-up at t={time:.6g}: energy growth factor {growth:.3e}"
        )
