"""Exception hierarchy shared by all modules."""


class OdesepError(Exception):
    """Base class for every error raised by this package."""


class ExprSyntaxError(OdesepError, ValueError):
    """Malformed equation string. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, source="", offset=0):
        super().__init__(f"{message} at offset {offset}: {source!r}")
        self.source = source
        self.offset = offset


class UnknownFunctionError(ExprSyntaxError):
    pass


class UnboundSymbolError(OdesepError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"unbound symbol {self.name!r}"


class DomainError(OdesepError, ArithmeticError):
    """Real-arithmetic domain violation; ``node`` is the offending sub-expression."""

    def __init__(self, message, node=None):
        where = f" in '{node}'" if node is not None else ""
        super().__init__(f"{message}{where}")
        self.node = node


class ModelError(OdesepError, ValueError):
    """Ill-formed model (undeclared symbols, duplicate roles, ...)."""


class RoleError(ModelError):
    """Declared-linear parameters that are not structurally linear."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


class SolverError(OdesepError, RuntimeError):
    def __init__(self, message, time=None):
        suffix = f" at t={time:.10g}" if time is not None else ""
        super().__init__(f"{message}{suffix}")
        self.time = time


class IdentifiabilityError(OdesepError, ArithmeticError):
    """Singular or ill-conditioned normal matrix in a linear estimate."""

    def __init__(self, message, parameters=()):
        super().__init__(message)
        self.parameters = tuple(parameters)


class OptimizationError(OdesepError, RuntimeError):
    def __init__(self, message, best_x=None, best_value=None):
        super().__init__(message)
        self.best_x = best_x
        self.best_value = best_value
