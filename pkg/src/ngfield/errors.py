"""Exception hierarchy shared by all ngfield modules."""


class NgfieldError(Exception):
    """Base class for every error raised by ngfield."""


class InputError(NgfieldError, ValueError):
    """Invalid user input (files, configuration, arguments)."""


class NumericalError(NgfieldError, ArithmeticError):
    """A numerical procedure failed on otherwise valid input."""


# sparse_core
class NotPositiveDefinite(NumericalError):
    pass


class DimensionMismatch(InputError):
    pass


# mesh_fem
class InvalidInterval(InputError):
    pass


class InvalidGeometry(InputError):
    pass


class DegenerateElement(InputError):
    pass


class NonPositiveKappa(InputError):
    pass


class UnsupportedAlpha(InputError):
    pass


class LocationOutsideMesh(InputError):
    """Raised when observation locations fall outside the mesh.

    ``indices`` lists the offending rows of the location array.
    """

    def __init__(self, indices, message=None):
        self.indices = list(indices)
        if message is None:
            shown = ", ".join(str(i) for i in self.indices[:10])
            more = "" if len(self.indices) <= 10 else ", ..."
            message = f"{len(self.indices)} location(s) outside the mesh: [{shown}{more}]"
        super().__init__(message)


# gig_dist
class NonPositiveArgument(InputError):
    pass


class InvalidParams(InputError):
    pass


class MomentUndefined(NumericalError):
    pass


# spde_model
class InvalidShape(InputError):
    pass


class InvalidFamily(InputError):
    pass


# inference
class BracketFailure(NumericalError):
    pass


class RankDeficientB(NumericalError):
    pass


class SingularQpar(NumericalError):
    pass


# prediction
class PatternNotCovered(NumericalError):
    pass


class TooFewSamples(InputError):
    pass


class NonPositiveVariance(InputError):
    pass


class FoldTooSmall(InputError):
    pass


# cli_app
class MalformedCsv(InputError):
    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        super().__init__(f"MalformedCsv: {path}:{line}: {reason}")


class MissingColumn(InputError):
    pass


class ConfigError(InputError):
    pass
