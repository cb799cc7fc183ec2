"""
errors.py

Exceptions raised by the toolkit. The CLI turns any of these into exit code 1.
"""


class QuantAuditError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class CheckpointError(QuantAuditError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


class NonFiniteError(QuantAuditError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EvaluationError(QuantAuditError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ScheduleDomainError(QuantAuditError):
    pass


class StatsError(QuantAuditError):
    pass


class TrajectoryError(QuantAuditError):
    pass


class ConfigError(QuantAuditError):
    pass
