"""Exceptions shared across the pipeline, operator and learner modules."""


class IncompatibilityError(RuntimeError):
    """A pipeline cannot run on the given data.

    Callers map this to a loss of ``+inf``.  ``node`` names the failing slot
    when known.
    """

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message)
        self.node = node
        self.cause = message

    def __str__(self) -> str:
        base = super().__str__()
        return f"[{self.node}] {base}" if self.node else base
