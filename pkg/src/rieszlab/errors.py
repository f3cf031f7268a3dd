"""Exception types shared across modules."""


class ParameterWindowError(ValueError):
    """Parameters outside the admissible window of the requested computation."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed to reach its tolerance."""


class KernelQuadratureError(RuntimeError):
    """Kernel quadrature failed to converge; carries the offending radii."""

    def __init__(self, message, r=None, r_prime=None):
        super().__init__(message)
        self.r = r
        self.r_prime = r_prime
