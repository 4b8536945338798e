"""Exception and warning types raised across the package."""


class KrrImputeError(Exception):
    """Base class for all library errors."""


class InvalidInput(KrrImputeError, ValueError):
    pass


class NotPositiveSemidefinite(KrrImputeError):
    pass


class NumericalSingularity(KrrImputeError):
    pass


class NonFiniteObjective(KrrImputeError):
    pass


class NoResponders(KrrImputeError):
    pass


class DegenerateTrace(KrrImputeError):
    pass


class RankDeficient(KrrImputeError):
    pass


class StratumTooSmall(KrrImputeError):
    pass


class TooManyFailures(KrrImputeError):
    pass


class MalformedCsv(KrrImputeError):
    pass


class MissingInCovariates(KrrImputeError):
    pass


class AllMissing(KrrImputeError):
    pass


class NonFiniteRiskWarning(RuntimeWarning):
    """The density-ratio exponent hit the overflow clamp at convergence."""


class PropensityBoundWarning(RuntimeWarning):
    """Estimated inverse propensity weights exceed the configured bound."""


class RankDeficientWarning(RuntimeWarning):
    pass


class NoMissingRowsWarning(RuntimeWarning):
    pass
