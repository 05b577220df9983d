"""Exception types shared across the engine."""


class IncfactorError(Exception):
    """Base class for all engine errors."""


class StoreError(IncfactorError):
    """Relational store misuse: unknown relation, arity mismatch, bad counts."""


class EvidenceConflictError(StoreError):
    """A tuple was labeled both positive and negative evidence."""


class ParseError(IncfactorError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" at line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(message + loc)


class ProgramError(IncfactorError):
    """Semantic errors in a rule program: undeclared predicates, unsafe or
    unstratified rules, arity mismatches."""


class GroundingError(IncfactorError):
    """Program/store schema mismatch during grounding."""


class EnumerationCapError(IncfactorError):
    """Too many free variables for exact enumeration / strawman tables."""

    def __init__(self, free_vars, cap):
        self.free_vars = free_vars
        self.cap = cap
        super().__init__(
            f"{free_vars} free variables exceed the enumeration cap of {cap}"
        )


class BundleError(IncfactorError):
    """Materialization bundle problems: fingerprint mismatch, missing parts."""


class SamplesExhaustedError(IncfactorError):
    """The stored sample bundle ran out before the requested sample count."""


class ConvergenceError(IncfactorError):
    """An iterative solver failed to converge."""

    def __init__(self, message, duality_gap=None):
        self.duality_gap = duality_gap
        if duality_gap is not None:
            message = f"{message} (last duality gap {duality_gap:.3e})"
        super().__init__(message)


class LambdaSearchError(IncfactorError):
    """Even the smallest probed regularization exceeded the KL threshold."""


class DivergenceError(IncfactorError):
    """Training diverged (NaN/inf loss)."""

    def __init__(self, step_size):
        self.step_size = step_size
        super().__init__(f"training diverged at step size {step_size}")
