"""Exception types shared across the package."""


class FedAnonError(Exception):
    """Base class for all package errors."""


# network core
class DimensionMismatch(FedAnonError, ValueError):
    pass


class ShapeError(FedAnonError, ValueError):
    pass


class NonFiniteActivation(FedAnonError, FloatingPointError):
    pass


class NoTape(FedAnonError, RuntimeError):
    pass


class MisalignedUpdate(FedAnonError, ValueError):
    pass


class CorruptStream(FedAnonError, ValueError):
    pass


class VersionMismatch(FedAnonError, ValueError):
    pass


# anonymizer
class InvalidLabel(FedAnonError, ValueError):
    pass


class EmptyBatch(FedAnonError, ValueError):
    pass


class SingleClassSchema(FedAnonError, ValueError):
    pass


# federated training
class EmptyClientSet(FedAnonError, ValueError):
    pass


class InsufficientData(FedAnonError, ValueError):
    pass


class NonFiniteLoss(FedAnonError, FloatingPointError):
    pass


class PrivacyViolation(FedAnonError, RuntimeError):
    """Raised when something other than model updates crosses the client/server boundary."""


class UnexpectedClient(FedAnonError, ValueError):
    """An update arrived from a client that was not selected for the round."""


# data pipeline
class RecordingTooShort(FedAnonError, ValueError):
    pass


class ZeroVariance(FedAnonError, ValueError):
    pass


class AxisCount(FedAnonError, ValueError):
    pass


class InvalidRatio(FedAnonError, ValueError):
    pass


class InvalidSpec(FedAnonError, ValueError):
    pass


class SchemaError(FedAnonError, ValueError):
    pass


# evaluation
class SingleClassData(FedAnonError, ValueError):
    pass


class EmptySet(FedAnonError, ValueError):
    pass


class DegenerateLabels(FedAnonError, ValueError):
    pass


# cli
class ConfigError(FedAnonError, ValueError):
    pass


class MissingBundle(FedAnonError, FileNotFoundError):
    pass


class ClientNotFound(FedAnonError, KeyError):
    pass
