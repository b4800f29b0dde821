class ContractViolation(ValueError):
    """Input or oracle output violates an operation's precondition."""


class KernelContractError(ContractViolation):
    """Kernel Gram block is not positive semidefinite beyond tolerance."""


class ParseError(ContractViolation):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class NonConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float | None = None):
        self.residual = residual
        super().__init__(msg)
