"""Exception hierarchy shared by every FedLPPA module and the CLI exit-code mapping."""

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


class FedLPPAError(Exception):
    """Base class for all simulator errors"""


class ConfigError(FedLPPAError):
    """Invalid experiment configuration or command-line usage"""


class ShapeError(FedLPPAError, ValueError):
    """Tensor or array shapes do not line up"""


class LabelError(FedLPPAError, ValueError):
    """A mask or box cannot produce a valid sparse label"""


class ProtocolError(FedLPPAError):
    """The federation round protocol was violated or a client failed"""


class DatasetError(FedLPPAError):
    """A dataset directory is missing, incomplete or malformed"""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception raised by a subcommand to the documented exit code

    A bare ValueError (an out-of-range argument below the config layer) counts as a config error.
    """
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG_ERROR
    if isinstance(exc, ValueError) and not isinstance(exc, FedLPPAError):
        return EXIT_CONFIG_ERROR
    return EXIT_RUNTIME_ERROR
