"""Exception hierarchy shared by the solvers and the verification lab."""


class RSGameError(Exception):
    """Base class for every error raised by :mod:`rsgame`."""


# -- model validation -------------------------------------------------------


class ModelError(RSGameError):
    pass


class ShapeMismatch(ModelError):
    pass


class NegativeOffDiagonal(ModelError):
    def __init__(self, i, j, u, value):
        self.i, self.j, self.u, self.value = i, j, tuple(u), value
        super().__init__(f"rate[{i}][{j}] at actions {self.u} is {value!r} < 0")


class NonConservativeRow(ModelError):
    def __init__(self, i, u, row_sum):
        self.i, self.u, self.row_sum = i, tuple(u), row_sum
        super().__init__(f"row {i} at actions {self.u} sums to {row_sum!r}, not 0")


class NegativeCost(ModelError):
    def __init__(self, i, u, value):
        self.i, self.u, self.value = i, tuple(u), value
        super().__init__(f"cost[{i}] at actions {self.u} is {value!r} < 0")


class InvalidMixedAction(ModelError):
    pass


class BadTruncationLevel(ModelError):
    pass


class CertificateViolated(ModelError):
    def __init__(self, i, u1, u2, slack):
        self.i, self.u1, self.u2, self.slack = i, u1, u2, slack
        super().__init__(
            f"Lyapunov drift fails at state {i}, actions ({u1}, {u2}): slack {slack:.3e}"
        )


class SchemaError(ModelError):
    """A model, solution or profile document does not follow its schema."""


# -- matrix games -------------------------------------------------------------


class NonFiniteEntry(RSGameError):
    pass


class MatrixGameFailure(RSGameError):
    pass


# -- solvers ------------------------------------------------------------------


class SolverError(RSGameError):
    pass


class NoConvergence(SolverError):
    def __init__(self, where, detail):
        self.where, self.detail = where, detail
        super().__init__(f"no convergence on {where}: {detail}")


class GridTooCoarse(SolverError):
    pass


class StepUnstable(SolverError):
    pass


class HorizonBeyondEpsilon(SolverError):
    def __init__(self, t_epsilon):
        self.t_epsilon = t_epsilon
        super().__init__(f"policy horizon exceeds T_eps = {t_epsilon:.6g}")


class GateFailed(SolverError):
    def __init__(self, gate, detail=""):
        self.gate = gate
        super().__init__(f"{gate} gate failed {detail}".strip())


class ResidualTooLarge(SolverError):
    pass


class MonotonicityViolated(SolverError):
    pass


# -- linear algebra / lab -----------------------------------------------------


class NotIrreducible(RSGameError):
    pass


class PowerIterationStalled(RSGameError):
    pass


class SeriesTruncationOverflow(RSGameError):
    pass


class SeriesDiverges(RSGameError):
    pass


class MomentInfinite(RSGameError):
    pass


class SaddleViolated(RSGameError):
    def __init__(self, player, strategy, margin):
        self.player, self.strategy, self.margin = player, strategy, margin
        super().__init__(f"player {player} improves by deviating: margin {margin:.3e}")
