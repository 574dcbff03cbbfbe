class RecRankerError(Exception):
    """Base class for pipeline errors."""


class ConfigError(RecRankerError, ValueError):
    pass


class ParseError(RecRankerError, ValueError):
    pass


class ValidationError(RecRankerError, ValueError):
    pass


class EmptyCorpusError(RecRankerError):
    pass


class TrainingError(RecRankerError):
    pass


class ContractError(RecRankerError, ValueError):
    pass


class MetricError(RecRankerError, ValueError):
    pass


class GatewayError(RecRankerError):
    """Raised when a completion backend cannot produce an answer."""


class TransportError(GatewayError):
    pass


class ProtocolError(GatewayError):
    pass
