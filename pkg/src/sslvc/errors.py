"""Exception hierarchy shared by every subsystem.

Each class carries a short ``kind`` tag that the CLI puts in its JSON error
envelope.
"""


class VCError(Exception):
    kind = "error"


class FormatError(VCError, ValueError):
    kind = "format_error"


class ConfigError(VCError, ValueError):
    kind = "config_error"


class ShapeError(VCError, ValueError):
    kind = "shape_error"


class DomainError(VCError, ValueError):
    kind = "domain_error"


class InputError(VCError, ValueError):
    kind = "input_error"


class ParameterError(VCError, ValueError):
    kind = "parameter_error"


class ExtractionError(VCError, RuntimeError):
    kind = "extraction_error"


class EvalError(VCError, RuntimeError):
    kind = "eval_error"


class TrainingError(VCError, RuntimeError):
    kind = "training_error"


class PreflightError(VCError, RuntimeError):
    kind = "preflight_error"
