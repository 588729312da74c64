"""Exception hierarchy shared by every module of the package."""


class MACLError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class DimensionError(MACLError, ValueError):
    pass


class DomainError(MACLError, ValueError):
    pass


class DegenerateInputError(MACLError, ValueError):
    pass


class ContractError(MACLError, ValueError):
    pass


class TrainingDivergenceError(MACLError, ArithmeticError):
    pass


class IngestError(MACLError):
    pass


class EmptyCorpusError(MACLError):
    pass


class SplitError(MACLError):
    pass


class ConfigError(MACLError, ValueError):
    pass


class ItemLookupError(MACLError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FitError(MACLError):
    pass


class ModalityAbsentError(MACLError):
    pass


class AugmentationUnavailableError(MACLError):
    pass


class SamplingError(MACLError):
    pass


class FormatError(MACLError):
    pass


class IncompatibleCheckpointError(MACLError):
    pass


class EmptySetError(MACLError):
    pass
