"""Exception types shared across the simulator."""


class SimulationError(Exception):
    """Base class for all simulator errors."""


class ConvergenceError(SimulationError):
    """A truncated numerical problem did not converge at the requested size."""


class DispersiveRegimeError(SimulationError, ValueError):
    """Qubit and cavity are too close to resonance for a dispersive treatment."""


class DomainError(SimulationError, ValueError):
    """An argument lies outside the domain of the model."""


class NoBistabilityError(DomainError):
    """The reduced detuning is too small for the Duffing response to be bistable."""


class ConfigError(SimulationError, ValueError):
    """Invalid run configuration; ``pointer`` is a JSON pointer to the offending field."""

    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")
