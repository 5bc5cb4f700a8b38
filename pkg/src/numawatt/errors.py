class NumawattError(Exception):
    pass


class InvalidTrace(NumawattError, ValueError):
    """A trace file or frame sequence violates the format or its invariants."""


class TraceVersionError(InvalidTrace):
    pass


class StatParseError(NumawattError, ValueError):
    pass


class TaskVanished(NumawattError):
    """A task disappeared between enumeration and read; skip it for this frame."""


class TargetExited(NumawattError):
    pass


class UnsupportedPlatform(NumawattError):
    pass


class ScenarioInvalid(NumawattError, ValueError):
    pass


class CalibrationMismatch(NumawattError):
    pass
