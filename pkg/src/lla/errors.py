"""Exception hierarchy shared by every module.

The CLI maps :class:`ConfigError` to exit code 2 and every other
:class:`LLAError` to exit code 3.
"""


class LLAError(Exception):
    pass


class ShapeError(LLAError, ValueError):
    pass


class InputError(LLAError, ValueError):
    pass


class UnsupportedDimensionError(InputError):
    pass


class ResourceError(LLAError):
    pass


class FormatError(LLAError):
    pass


class ConstructionError(LLAError):
    pass


class SelectionError(LLAError):
    pass


class ConfigError(LLAError):
    pass


class SimulatorBugError(LLAError, AssertionError):
    pass


class DivergenceError(LLAError):
    """Non-finite loss during an optimisation loop."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
