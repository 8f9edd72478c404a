"""Exception types shared across the package."""


class OpenDGError(Exception):
    """Base class for all package errors."""


class InputError(OpenDGError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class ConfigurationError(OpenDGError):
    """Components are wired together with incompatible shapes or settings."""


class SequenceTooLongError(OpenDGError):
    """A token sequence exceeds the text encoder's context capacity.

    Raised instead of silently truncating, so learnable tokens are never
    dropped without the caller noticing.
    """


class InsufficientDataError(OpenDGError):
    """A (domain, class) pair has fewer images than the requested shot count."""


class MissingFilesError(OpenDGError):
    """Referenced image files do not exist on disk."""

    def __init__(self, paths):
        self.paths = list(paths)
        super().__init__(f"missing files: {', '.join(str(p) for p in self.paths)}")


class ServiceError(OpenDGError):
    """A generative service call failed after exhausting retries.

    ``partial`` carries whatever results were collected before the failure.
    """

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class CredentialError(OpenDGError):
    """A live service client is missing its API credential."""

    def __init__(self, env_var: str):
        self.env_var = env_var
        super().__init__(
            f"credential environment variable {env_var!r} is not set; "
            f"export it or switch to manifest/fixture mode (--offline)"
        )


class CheckpointSchemaError(OpenDGError):
    """A checkpoint file is corrupt or has an incompatible schema."""


class TrainingDivergedError(OpenDGError):
    """Training produced a non-finite loss.

    ``last_checkpoint`` points at the most recent finite-state checkpoint,
    if one was written.
    """

    def __init__(self, message, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)
