"""Exception hierarchy shared across the package."""


class SitDialError(Exception):
    """Base class for every error raised by this package."""


# corpus
class MissingScene(SitDialError):
    pass


class MalformedRecord(SitDialError):
    def __init__(self, path, locator, reason):
        self.path = str(path)
        self.locator = locator
        self.reason = reason
        super().__init__(f"{self.path} [{locator}]: {reason}")


class DanglingObjectId(SitDialError):
    pass


class EmptyCorpus(SitDialError):
    pass


# generator
class InfeasibleSpec(SitDialError):
    pass


class NoConvergence(SitDialError):
    pass


# featurizer
class MissingPredictedClass(SitDialError):
    pass


class SceneTooLarge(SitDialError):
    pass


class TurnOutOfRange(SitDialError):
    pass


class ConfigError(SitDialError):
    pass


# neural
class ShapeMismatch(SitDialError):
    pass


class AllMasked(SitDialError):
    pass


class EmptyValidation(SitDialError):
    pass


class MissingCLS(SitDialError):
    pass


class DivergenceDetected(SitDialError):
    pass


# metrics / stats
class LengthMismatch(SitDialError):
    pass


class EmptyInput(SitDialError):
    pass


class ConstantInput(SitDialError):
    pass


class TooFewSamples(SitDialError):
    pass


class NoLabeledTurns(SitDialError):
    pass


class NoPairs(SitDialError):
    pass
