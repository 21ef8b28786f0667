"""Exception hierarchy shared across the package."""


class NutrirecError(Exception):
    """Base class; ``kind`` is the short machine-readable category."""

    kind = "error"


class SchemaError(NutrirecError):
    kind = "schema"


class ReferentialError(NutrirecError):
    kind = "referential"


class ValidationError(NutrirecError, ValueError):
    kind = "validation"


class ConfigError(NutrirecError):
    kind = "config"


class ShapeError(NutrirecError, ValueError):
    kind = "shape"


class NonFiniteError(NutrirecError, FloatingPointError):
    kind = "non_finite"


class ContractError(NutrirecError):
    kind = "contract"


class CheckpointError(NutrirecError):
    kind = "checkpoint"


class DivergenceError(NutrirecError):
    kind = "divergence"


class GatewayError(NutrirecError):
    kind = "gateway"

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status
