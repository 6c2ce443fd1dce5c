"""Exception hierarchy shared by all bisque modules."""


class BisqueError(Exception):
    """Base class for numerical failures raised by this package."""


class TableExhaustedError(BisqueError, ValueError):
    def __init__(self, level, max_level):
        self.level = level
        self.max_level = max_level
        super().__init__(
            f"nested rule table exhausted: level {level} requested, maximum level is {max_level}"
        )


class IntegrationError(BisqueError):
    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class TransformDomainError(BisqueError, ValueError):
    def __init__(self, coordinate, value, message):
        self.coordinate = coordinate
        self.value = value
        super().__init__(f"coordinate {coordinate}: {message} (got {value!r})")


class ModeNotFoundError(BisqueError):
    def __init__(self, message, best_point=None, grad_norm=None):
        self.best_point = best_point
        self.grad_norm = grad_norm
        super().__init__(message)


class NonFiniteDensityError(BisqueError):
    def __init__(self, location, value=None):
        self.location = location
        self.value = value
        super().__init__(f"non-finite log-density {value!r} at {location!r}")


class WeightConstructionError(BisqueError):
    def __init__(self, message, eigenvalues=None):
        self.eigenvalues = eigenvalues
        super().__init__(message)


class DegenerateMixtureError(BisqueError):
    """Standardizing constant of the mixture weights is not positive."""


class CholeskyError(BisqueError):
    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(message or f"covariance matrix not positive definite (failing pivot {pivot})")
