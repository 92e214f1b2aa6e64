"""Exception hierarchy shared by all modules."""


class FalkonError(Exception):
    """Base class for library errors."""


class DimensionMismatchError(FalkonError, ValueError):
    def __init__(self, msg="dimension mismatch"):
        if "dimension mismatch" not in msg:
            msg = f"dimension mismatch: {msg}"
        super().__init__(msg)


class BudgetError(FalkonError):
    """A scratch allocation or plan does not fit the memory budget."""


class NotPositiveDefiniteError(FalkonError, ArithmeticError):
    def __init__(self, block_column, msg=None):
        self.block_column = block_column
        super().__init__(msg or f"matrix is not positive definite (failing block column {block_column})")


class DeadlockError(FalkonError, RuntimeError):
    """No work-table progress within the configured timeout."""


class WorkerAborted(FalkonError, RuntimeError):
    """Raised in workers when a peer failed and the schedule was aborted."""


class SingularTriangularError(FalkonError, ArithmeticError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"zero diagonal entry at index {index}")


class AliasingError(FalkonError, ValueError):
    pass


class DivergenceError(FalkonError, ArithmeticError):
    def __init__(self, iteration):
        self.iteration = iteration
        super().__init__(f"conjugate gradient produced non-finite values at iteration {iteration}")


class LossContractError(FalkonError, ValueError):
    """A loss violated its contract (e.g. negative curvature)."""


class InvalidLabelError(FalkonError, ValueError):
    pass


class DataFormatError(FalkonError, ValueError):
    pass
