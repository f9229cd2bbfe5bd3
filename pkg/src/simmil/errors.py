class ContractError(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


class ConfigError(ValueError):
    """Raised for unreadable or invalid experiment configuration."""


class FormatError(ValueError):
    """Raised when a binary artifact has a bad magic, version or truncated payload."""
