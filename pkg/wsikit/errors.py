"""Exception hierarchy for wsikit.

Every error carries the exit code the CLI returns for it.
"""


class WsikitError(Exception):
    """Base class for all wsikit errors"""

    exit_code = 5


class ConfigError(WsikitError):
    """Invalid or unresolvable configuration"""

    exit_code = 2


class InputError(WsikitError, ValueError):
    """Invalid input data or arguments"""

    exit_code = 3


class InvalidSpecError(InputError):
    pass


class BoundsError(InputError):
    pass


class EmptySlideError(InputError):
    pass


class ManifestMismatchError(InputError):
    pass


class DimensionMismatchError(InputError):
    pass


class EmptyInputError(InputError):
    pass


class InvalidBatchError(InputError):
    pass


class InsufficientSamplesError(InputError):
    pass


class CorruptFileError(InputError):
    pass


class EmptyPoolError(InputError):
    pass


class InvalidStageError(InputError):
    pass


class FrozenGroupError(InputError):
    pass


class EncoderError(InputError):
    """Encoder failure on a single tile; aborts the whole batch"""

    def __init__(self, tile_index: int, message: str):
        super().__init__(f"encoder failed on tile {tile_index}: {message}")
        self.tile_index = tile_index


class NumericError(WsikitError):
    """Non-finite values detected"""

    exit_code = 4
