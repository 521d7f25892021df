"""Exception types raised by the solvers and the file readers."""


class OTProjError(Exception):
    """Base class for all package errors."""


class MassMismatch(OTProjError):
    def __init__(self, mass_a: float, mass_b: float):
        super().__init__(f"masses differ: {mass_a!r} vs {mass_b!r}")
        self.mass_a = mass_a
        self.mass_b = mass_b


class TargetOutsideDomain(OTProjError):
    pass


class InstanceTooLarge(OTProjError):
    pass


class SolverFailure(OTProjError):
    pass


class Infeasible(OTProjError):
    pass


class NotConverged(OTProjError):
    def __init__(self, max_iter: int, error: float):
        super().__init__(f"no convergence after {max_iter} iterations (marginal error {error:.3e})")
        self.max_iter = max_iter
        self.error = error


class NonFiniteBisection(OTProjError):
    pass


class Cancelled(OTProjError):
    pass


class DensityFormatError(OTProjError, ValueError):
    pass
