"""Exception types shared across the package."""


class IncopError(Exception):
    """Base class for all package errors."""


class ConfigError(IncopError, ValueError):
    """Invalid configuration (layer specs, experiment config, criteria)."""


class InputError(IncopError, ValueError):
    """Bad arguments or data passed to an operation."""


class StateError(IncopError, RuntimeError):
    """Operation called on an object in the wrong state."""


class FormatError(IncopError, ValueError):
    """Malformed on-disk data (IDX files, checkpoints)."""


class DeadLayerError(IncopError, RuntimeError):
    """A layer lost all of its surviving weights during pruning."""

    def __init__(self, layer: int, iteration: int):
        self.layer = layer
        self.iteration = iteration
        super().__init__(f"layer {layer} fully pruned at iteration {iteration}")
