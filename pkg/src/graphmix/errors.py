"""Exception hierarchy. Every class carries a stable machine-readable code
that the CLI maps to its exit status and error line."""

from __future__ import annotations


class GraphMixError(Exception):
    """Base class for all library errors."""

    code = "error"


class IndexOutOfRangeError(GraphMixError):
    code = "index-out-of-range"


class SelfLoopError(GraphMixError):
    code = "self-loop"


class DuplicateEdgeError(GraphMixError):
    code = "duplicate-edge"


class FeatureShapeError(GraphMixError):
    code = "feature-shape"


class CycleError(GraphMixError):
    """Raised when a directed graph that must be acyclic contains a cycle.

    `cycle` holds one witness cycle as a node list (first node repeated last).
    """

    code = "cycle-detected"

    def __init__(self, message: str, cycle: list[int]):
        super().__init__(message)
        self.cycle = cycle


class OracleSizeError(GraphMixError):
    code = "oracle-size"


class ShapeError(GraphMixError):
    code = "shape-mismatch"


class SingularMatrixError(GraphMixError):
    code = "singular"


class ZeroDiagonalError(GraphMixError):
    code = "zero-diagonal"


class MissingFeaturesError(GraphMixError):
    code = "missing-features"


class GammaRangeError(GraphMixError):
    code = "gamma-range"


class NotADagError(GraphMixError):
    code = "not-a-dag"


class NotALineError(GraphMixError):
    code = "not-a-line"


class TapeEmptyError(GraphMixError):
    code = "tape-empty"


class NoInverseNodeError(GraphMixError):
    code = "no-inverse-node"


class DivergenceError(GraphMixError):
    """Training loss became NaN/Inf; `step` is the offending step index."""

    code = "divergence"

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class InvalidModeError(GraphMixError):
    code = "invalid-mode"


class ConfigError(GraphMixError):
    """Invalid CLI/run configuration (exit code 2 at the CLI)."""

    code = "bad-config"
