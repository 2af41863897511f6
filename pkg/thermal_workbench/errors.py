"""Exception hierarchy shared by the workbench. The CLI maps exit_code to the process status."""


class WorkbenchError(Exception):
    exit_code = 1


class InputError(WorkbenchError):
    """Bad user or data input: lengths, names, files, config keys."""
    exit_code = 2


class DimensionError(InputError):
    pass


class ContractError(WorkbenchError):
    """A caller broke an operation's precondition."""
    exit_code = 2


class DivergenceError(WorkbenchError):
    """Training produced a non-finite loss."""
    exit_code = 4


class GateFailure(WorkbenchError):
    exit_code = 3

    def __init__(self, message: str, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class PropagationError(DivergenceError):
    """A sub-network produced a non-finite value during a forward pass."""
