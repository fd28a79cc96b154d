"""Exception types shared across the engine."""


class LtlaError(Exception):
    """Base class for engine-specific failures."""


class ImpossibleObservation(LtlaError):
    """A token has zero probability under every reachable hidden state.

    Raised instead of silently returning -inf so callers can distinguish
    "the constraint is unsatisfiable" from "the surrogate assigns zero mass".
    """

    def __init__(self, token: int, position: int | None = None):
        self.token = token
        self.position = position
        where = "" if position is None else f" at position {position}"
        super().__init__(f"token {token} has zero mass under all states{where}")


class UnsatisfiableAtStep(LtlaError):
    """Every candidate token at a decode step has zero guided mass."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"no candidate token has positive guided mass at step {step}")


class SizeGuardExceeded(LtlaError):
    """A brute-force or materialization request exceeds its hard size cap."""

    def __init__(self, requested: int, cap: int, what: str):
        self.requested = requested
        self.cap = cap
        super().__init__(f"{what}: requested size {requested} exceeds cap {cap}")


class StateCapExceeded(LtlaError):
    """DFA construction would produce more states than the configured cap."""

    def __init__(self, cap: int):
        self.cap = cap
        super().__init__(f"automaton construction exceeds the state cap of {cap}")


class TrainingDiverged(LtlaError):
    """Training loss became non-finite; carries the step for diagnostics."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"loss became {value} at step {step}")
