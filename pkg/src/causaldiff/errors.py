"""Exception and warning types.

Every error carries an ``exit_code`` so the CLI can map failures from any
stage to a distinct process status.
"""


class CausalDiffError(Exception):
    exit_code = 1


class CycleDetected(CausalDiffError):
    exit_code = 10


class DanglingEdge(CausalDiffError):
    exit_code = 11


class DimensionMismatch(CausalDiffError, ValueError):
    exit_code = 12


class IncommensurateResolutions(CausalDiffError, ValueError):
    exit_code = 13


class DegenerateLink(CausalDiffError, ValueError):
    exit_code = 14


class NonPositiveObservation(CausalDiffError, ValueError):
    exit_code = 15


class NoObservation(CausalDiffError):
    exit_code = 16


class NonFiniteState(CausalDiffError, FloatingPointError):
    exit_code = 20

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class OddStepCount(CausalDiffError, ValueError):
    exit_code = 21


class NegativeVariance(CausalDiffError, ValueError):
    exit_code = 22


class ZeroVariance(CausalDiffError, ValueError):
    exit_code = 23


class Diverged(CausalDiffError, FloatingPointError):
    exit_code = 24


class DegenerateMeanScale(CausalDiffError, ZeroDivisionError):
    exit_code = 30


class SingularCovariance(CausalDiffError, ValueError):
    exit_code = 31


class NonFiniteGradient(CausalDiffError, FloatingPointError):
    exit_code = 32


class SingularInnerMatrix(CausalDiffError, ValueError):
    exit_code = 33


class SequenceExhausted(CausalDiffError, IndexError):
    exit_code = 40


class ConfigInvalid(CausalDiffError, ValueError):
    exit_code = 50


class OutOfRange(CausalDiffError, ValueError):
    exit_code = 51


class DegenerateLabels(CausalDiffError, ValueError):
    exit_code = 52


class TrainingMissing(CausalDiffError):
    exit_code = 53


class ArtifactMissing(CausalDiffError):
    exit_code = 54


class MaxIterations(CausalDiffError):
    """Soft failure: optimisation stopped at the iteration cap."""

    exit_code = 60


class NoObservationWarning(UserWarning):
    pass


class DegenerateEnsembleWarning(UserWarning):
    pass


class MaxIterationsWarning(UserWarning):
    pass
