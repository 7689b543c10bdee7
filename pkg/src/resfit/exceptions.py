"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Input with the wrong shape for the network, environment or buffer."""


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite.

    ``layer`` names the offending layer index when it is known.
    """

    def __init__(self, message, layer=None, diagnostics=None):
        super().__init__(message)
        self.layer = layer
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    """Base class for malformed checkpoint or segment streams."""


class VersionMismatchError(CheckpointError):
    pass


class TruncatedStreamError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    """Content hash of an exchanged file does not match its manifest entry."""


class CalibrationError(RuntimeError):
    """The scripted expert succeeds too rarely to collect demonstrations."""


class NotReadyError(RuntimeError):
    """Replay buffers do not yet hold enough sampleable transitions."""


class ConfigError(ValueError):
    pass
