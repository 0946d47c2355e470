"""Exception hierarchy shared across the package."""


class DcatsError(Exception):
    """Base class for all package errors."""


class DataError(DcatsError):
    """Malformed or inconsistent input data (dataset, metadata, graph files)."""


class ConfigError(DcatsError):
    """Invalid configuration values."""


class TrainingDivergedError(DcatsError):
    """Training produced a non-finite loss."""


class AgentError(DcatsError):
    """Base class for agent/backend failures."""


class ParseError(AgentError):
    """No valid proposal could be extracted from an agent response."""

    def __init__(self, message, rejections=None):
        super().__init__(message)
        self.rejections = list(rejections or [])


class RetryLimitError(AgentError):
    """Transient backend failures exceeded the retry cap."""


class AuthenticationError(AgentError):
    """The LLM endpoint rejected the credentials."""


class MalformedResponseError(AgentError):
    """The LLM endpoint answered, but without assistant text at the configured path."""
