"""Exception types shared across the package."""


class FluorotrackError(Exception):
    """Base class for all package-specific errors."""


class GeometryMismatchError(FluorotrackError):
    """Two grid objects were expected to share dims/spacing/origin."""


class VolumeIOError(FluorotrackError):
    """Base class for volume/field/projection file problems."""


class HeaderFormatError(VolumeIOError):
    """Missing magic, unknown keys, or otherwise malformed text header."""


class DataLengthError(VolumeIOError):
    """Payload size does not match the dimensions announced in the header."""


class NonFiniteDataError(VolumeIOError):
    """NaN or infinity encountered where finite values are required."""


class ConfigError(FluorotrackError):
    """Bad key, section, or value in a pipeline config file."""


class CheckpointError(FluorotrackError):
    """Base class for model checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic/version or truncated checkpoint payload."""


class MissingArtifactError(FluorotrackError):
    """An upstream artifact is absent; carries the producing subcommand."""

    def __init__(self, path, producer):
        self.path = str(path)
        self.producer = producer
        super().__init__(
            f"{self.path} not found; run the '{producer}' subcommand first"
        )
