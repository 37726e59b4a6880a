"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes or ranks."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation."""


class DivergenceError(ArithmeticError):
    """A numerical computation produced NaN or Inf."""


class CompatibilityError(ValueError):
    """Artifacts (checkpoint, dataset, model) disagree on dimensions or format."""


class ConfigError(ValueError):
    """An experiment configuration is missing, malformed, or inconsistent."""
