"""Exception hierarchy shared by every subsystem."""


class EdgeLoraError(Exception):
    """Base class. ``code`` is the machine-parsable token printed by the CLI."""

    code = "error"


class DimensionError(EdgeLoraError, ValueError):
    code = "dimension-error"


class LabelError(EdgeLoraError, ValueError):
    code = "label-error"


class StateError(EdgeLoraError, RuntimeError):
    code = "state-error"


class SchemaError(EdgeLoraError, ValueError):
    code = "schema-error"


class CountError(EdgeLoraError, ValueError):
    code = "count-error"


class ScheduleError(EdgeLoraError, ValueError):
    code = "schedule-error"


class CodecError(EdgeLoraError, ValueError):
    code = "codec-error"


class ConfigError(EdgeLoraError, ValueError):
    code = "config-error"


class InputError(EdgeLoraError, ValueError):
    code = "input-error"


class AdapterError(EdgeLoraError, ValueError):
    code = "adapter-error"


class CompatibilityError(EdgeLoraError, ValueError):
    code = "compatibility-error"


class FormatError(EdgeLoraError, ValueError):
    code = "format-error"


class DataError(EdgeLoraError, ValueError):
    code = "data-error"


class ConsistencyError(EdgeLoraError, RuntimeError):
    code = "consistency-error"


class ProtocolError(EdgeLoraError):
    code = "protocol-error"


class ConnectionFailed(EdgeLoraError, ConnectionError):
    code = "connection-error"
