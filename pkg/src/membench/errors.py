"""Exception hierarchy shared by all membench modules."""


class MembenchError(Exception):
    pass


class BackendUnavailable(MembenchError):
    """No usable timer or kernel backend on this host."""


class CalibrationError(MembenchError):
    pass


class ExtensionUnsupported(MembenchError):
    pass


class InvalidKernel(MembenchError, ValueError):
    """Kernel spec violates its own invariants (e.g. sve + post_increment)."""


class BufferLayoutError(MembenchError, ValueError):
    """Buffer misaligned or sized incompatibly with a kernel."""


class ValueOutOfRange(MembenchError, ValueError):
    pass


class SpecParseError(MembenchError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class InvariantViolation(MembenchError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConfigError(MembenchError, ValueError):
    pass


class MeasurementError(MembenchError):
    pass


class AnalysisError(MembenchError, ValueError):
    pass
