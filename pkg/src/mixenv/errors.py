"""Exception types shared across the estimation modules."""


class MixenvError(Exception):
    """Base class for all package-specific errors."""


class SingularCovarianceError(MixenvError):
    """A covariance matrix required to be positive definite is (numerically) singular."""


class RankDeficientDesignError(MixenvError):
    """The centered predictor cross-product X_c X_c^T is singular."""


class InformationSingularityError(MixenvError):
    """The assembled Fisher information matrix is singular."""


class UnstableBootstrapError(MixenvError):
    """More than 20% of bootstrap refits failed."""


class DataFormatError(MixenvError):
    """Input data violates a structural precondition (unbalanced, time-varying X, bad CSV...)."""
