class EchoVecException(Exception):
    """Base of every expected error, carries the exit code the CLI uses."""

    exitcode = 1

    def __init__(self, value=None, detail=None):
        super().__init__()
        self.value = value
        self.detail = detail

    def __str__(self):
        if self.value is None:
            ret = self.__class__.__name__
        else:
            ret = str(self.value)
        if self.detail:
            ret += (
                "\n==== detail begin ====\n%s\n==== detail end ===="
                % ''.join(self.detail).strip()
            )
        return ret


class ConfigurationException(EchoVecException):
    exitcode = 2


class InvalidConfig(ConfigurationException):
    pass


class MissingExemplars(ConfigurationException):
    pass


class DimMismatch(EchoVecException):
    exitcode = 2


class BackendException(EchoVecException):
    exitcode = 3


class BackendUnavailable(BackendException):
    pass


class BackendTimeout(BackendException):
    pass


class ProtocolError(BackendException):
    pass


class DataException(EchoVecException):
    exitcode = 4


class InvalidInput(DataException):
    pass


class DegenerateVector(DataException):
    pass


class InvalidRelevance(DataException):
    pass


class InsufficientCandidates(DataException):
    pass


class InsufficientPool(DataException):
    pass


class FormatMismatch(DataException):
    pass


class TrainingDiverged(DataException):
    def __init__(self, value=None, detail=None, step=None):
        super().__init__(value, detail)
        self.step = step
