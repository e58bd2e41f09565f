"""Exception hierarchy shared by every unifiedfl module."""


class UnifiedFLError(Exception):
    """Base class for all errors raised by unifiedfl."""


class SpecValidationError(UnifiedFLError, ValueError):
    """An architecture specification is internally inconsistent."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ContractViolation(UnifiedFLError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class ParseError(UnifiedFLError, ValueError):
    """A serialized stream or data file could not be decoded.

    ``location`` is a byte offset for binary formats and a 1-based line
    number for text formats.
    """

    def __init__(self, message, location=None, unit="byte offset"):
        if location is not None:
            message = f"{message} (at {unit} {location})"
        super().__init__(message)
        self.location = location
        self.unit = unit


class NumericError(UnifiedFLError, FloatingPointError):
    """A non-finite value appeared during forward or backward evaluation."""

    def __init__(self, message, node=None, client=None):
        parts = [message]
        if node is not None:
            parts.append(f"node {node}")
        if client is not None:
            parts.append(f"client {client}")
        super().__init__(" | ".join(parts))
        self.node = node
        self.client = client


class ConfigError(UnifiedFLError, ValueError):
    """Experiment configuration is invalid; ``violations`` lists every problem."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.violations))
