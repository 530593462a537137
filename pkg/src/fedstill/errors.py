"""Exception taxonomy shared across the package.

Two broad families matter for the command line tool: ``ConfigError``
subclasses mean the user handed us something malformed (scenario files,
unknown dataset names, over-dense scene specs) and map to exit code 2,
while ``ProtocolError`` subclasses mean a federation run reached a state
it cannot proceed from and map to exit code 3.  Engine-level errors
(shape mismatches, non-finite values) derive from ``FedstillError``
directly; they indicate internal misuse rather than user input.
"""


class FedstillError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FedstillError):
    """Invalid configuration or user input (CLI exit code 2)."""


class ProtocolError(FedstillError):
    """A run hit a state the protocol cannot proceed from (CLI exit code 3)."""


# ---------------------------------------------------------------- tensor engine

class ShapeMismatch(FedstillError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteValue(FedstillError):
    """An operation produced NaN or Inf."""


class NotScalar(FedstillError):
    """backward() was called on a non-scalar tensor."""


class MissingGradient(FedstillError):
    """An optimizer step was asked to update a parameter with no gradient."""


# ---------------------------------------------------------------- models

class UnknownClass(ProtocolError):
    """A class id or name is not present in the registry."""


class CorruptModel(ProtocolError):
    """A serialized model failed structural or checksum validation."""


class VersionMismatch(ProtocolError):
    """A serialized model uses an unsupported format version."""


# ---------------------------------------------------------------- scene generation

class PlacementFailure(ConfigError):
    """Rejection sampling could not place a structure; the spec is over-dense."""


class ParseError(ConfigError):
    """A scenario or config file could not be parsed."""


class ValidationError(ConfigError):
    """A parsed config is structurally valid JSON but semantically wrong."""


# ---------------------------------------------------------------- losses and metrics

class EmptyAnnotationSet(ProtocolError):
    """A masked loss was asked to average over zero annotated classes."""


class ClassSetMismatch(ProtocolError):
    """Prediction and target cover different class sets."""


class EmptyMask(ProtocolError):
    """A surface-distance metric received an empty mask."""


# ---------------------------------------------------------------- federation

class DataUnavailable(ProtocolError):
    """A strategy needs a client's raw data and the client no longer has it."""


class UntrainedClient(ProtocolError):
    """A client tried to upload before training on its current dataset."""


class HeterogeneousArchitectures(ProtocolError):
    """Parameter averaging was attempted across different architectures."""


class EmptyStore(ProtocolError):
    """The server store holds no client models."""


class EmptyDistillationSet(ProtocolError):
    """Pseudo-label generation was asked to run on zero volumes."""


class UncoveredClass(ProtocolError):
    """A class in the stage union is covered by no stored client model."""


class OneTimeInferenceViolation(ProtocolError):
    """Pseudo-label inference was requested twice within one stage."""


class MissingGlobalModel(ProtocolError):
    """Personalized inference needs a broadcast global model."""


class MissingLocalModel(ProtocolError):
    """Personalized inference needs the client's trained local model."""


# ---------------------------------------------------------------- CLI / reporting

class UnknownDataset(ConfigError):
    """An evaluation referenced a dataset name the run does not define."""


class StaleRun(ProtocolError):
    """A run directory no longer matches the scenario it was produced from."""


class IncompatibleRuns(ConfigError):
    """A report was asked to combine runs with different class registries."""
