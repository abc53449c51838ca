"""
Exception hierarchy for the first-layer precompute engine.

Library code raises these; the command-line layer translates them into
exit codes (see exit_code_for). Every checkpoint problem has its own class so
callers and tests can tell a bad magic from a truncated file.
"""

EXIT_VERIFICATION_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


class FirstLayerError(Exception):
    """Base class for all engine errors."""

    exit_code = EXIT_USAGE


class ShapeError(FirstLayerError, ValueError):
    """Tensor shapes do not fit the requested kernel."""


class ConfigError(FirstLayerError, ValueError):
    """Inconsistent or unknown architecture configuration."""


class InputError(FirstLayerError, ValueError):
    """Bad runtime input (token id out of range, empty prompt, ...)."""


class CacheOverflowError(FirstLayerError):
    """KV cache would grow past max_seq_len."""


class IneligibleArchitecture(FirstLayerError):
    """The first layer cannot be precomputed for this architecture."""

    EXPLANATION = (
        "absolute positional encoding is added right after the embedding "
        "layer, so the inputs of the first layer depend on the position and "
        "cannot be precomputed per token; only RoPE models are eligible"
    )


class CheckpointError(FirstLayerError):
    """Base class for checkpoint file problems."""

    exit_code = EXIT_IO


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    """Tensor set or shapes disagree with the stored config."""


class DuplicateTensorError(CheckpointError):
    pass


class TrailingDataError(CheckpointError):
    pass


def exit_code_for(error):
    """Map an exception to the CLI exit code."""
    if isinstance(error, FirstLayerError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_IO
    return EXIT_USAGE
