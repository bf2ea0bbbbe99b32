"""Exception hierarchy shared by the solvers, labs, CLI and server."""

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_SOLVER = 3


class LabError(Exception):
    """Base class; `exit_code` is what the CLI returns for it."""
    exit_code = EXIT_CHECK_FAILED

    def to_dict(self):
        return {"type": type(self).__name__, "message": str(self)}


class InputError(LabError, ValueError):
    exit_code = EXIT_INPUT


class StructuralError(LabError, ValueError):
    exit_code = EXIT_INPUT


class DomainError(LabError, ValueError):
    exit_code = EXIT_INPUT


class ConfigError(LabError, ValueError):
    exit_code = EXIT_INPUT


class PreconditionError(LabError, ValueError):
    exit_code = EXIT_INPUT


class TiltTooLargeError(LabError, ValueError):
    exit_code = EXIT_INPUT


class NumericError(LabError, ValueError):
    exit_code = EXIT_INPUT


class DecompositionError(LabError, ValueError):
    """Raised when a process has positive drift beyond tolerance."""

    def __init__(self, message, node=None, drift=None):
        super().__init__(message)
        self.node = node
        self.drift = drift


class InfeasibleMarketError(LabError):
    """No strictly consistent price system exists on the tree."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate or {}

    def to_dict(self):
        data = super().to_dict()
        data["certificate"] = self.certificate
        return data


class ExtractionError(LabError):
    pass


class ConstructionError(LabError):
    pass


class SolverError(LabError, RuntimeError):
    """Barrier iteration failed; `best_iterate` holds the last accepted point."""
    exit_code = EXIT_SOLVER

    def __init__(self, message, best_iterate=None, diagnostics=None):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.diagnostics = diagnostics or {}

    def to_dict(self):
        data = super().to_dict()
        data["diagnostics"] = self.diagnostics
        return data
