"""Exception hierarchy shared by every stab module."""


class StabError(Exception):
    """Base class; ``kind`` is the machine-readable prefix used by the CLI."""

    kind = "error"


class DimensionError(StabError, ValueError):
    kind = "dimension"


class DomainError(StabError, ValueError):
    kind = "domain"


class ContractError(StabError, ValueError):
    kind = "contract"


class SchemaError(StabError, ValueError):
    kind = "schema"


class IngestionError(StabError, ValueError):
    kind = "ingestion"


class ConfigError(StabError, ValueError):
    kind = "config"


class CheckpointError(StabError, ValueError):
    kind = "checkpoint"


class TrainingAbort(StabError, RuntimeError):
    kind = "training"
