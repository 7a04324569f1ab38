"""Exception hierarchy. CLI exit codes hang off the three base classes."""


class GaitSSLError(Exception):
    exit_code = 1


class ConfigError(GaitSSLError):
    exit_code = 2


class DataError(GaitSSLError):
    exit_code = 3


class NumericError(GaitSSLError):
    exit_code = 4


class TrialParseError(DataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class DuplicateTrialError(DataError):
    pass


class UnrecoverableFeatureError(DataError):
    pass


class EmptyFitError(DataError):
    pass


class InsufficientSubjectsError(ConfigError):
    pass


class NoSignalError(GaitSSLError):
    """Every loss term was absent for a step; the step is skipped."""


class DegenerateTaskError(DataError):
    pass


class CapacityError(ConfigError):
    pass
