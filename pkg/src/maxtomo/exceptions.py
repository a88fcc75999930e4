class SolverError(RuntimeError):
    """A linear solve failed to reach its tolerance.

    Attributes
    ----------
    residual : float
        Final relative residual reached before giving up.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual
