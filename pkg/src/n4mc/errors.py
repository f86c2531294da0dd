"""Exception hierarchy shared across the codec."""


class N4MCError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(N4MCError, ValueError):
    """Input violates a documented precondition."""


class EmptyInputError(ValidationError):
    pass


class MeshFormatError(ValidationError):
    """A mesh file could not be parsed.

    ``location`` is a human readable position (``line 12`` or ``byte 340``).
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        if location:
            message = f"{message} ({location})"
        super().__init__(message)


class CorruptionError(N4MCError):
    """A bitstream or container failed an integrity check."""

    def __init__(self, message: str, bit_offset: int | None = None, section: str | None = None):
        self.message = message
        self.bit_offset = bit_offset
        self.section = section
        parts = [message]
        if section is not None:
            parts.append(f"section={section}")
        if bit_offset is not None:
            parts.append(f"bit offset {bit_offset}")
        super().__init__(", ".join(parts))


class FingerprintMismatch(N4MCError):
    pass


class TrainingDiverged(N4MCError):
    def __init__(self, stage: str, step: int):
        self.stage = stage
        self.step = step
        super().__init__(f"non-finite loss in {stage} at step {step}")


class StageError(N4MCError):
    """Wraps a failure inside one stage of the compression pipeline."""

    def __init__(self, stage: str, cause: BaseException, hint: str | None = None):
        self.stage = stage
        self.cause = cause
        msg = f"stage '{stage}' failed: {cause}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
