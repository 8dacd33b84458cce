"""Exception hierarchy.

Every error carries a short ``code`` so the command line can print a
greppable ``error[CODE]: message`` line.
"""


class FlowCorrError(Exception):
    code = "E_GENERIC"


class FormatError(FlowCorrError):
    code = "E_FORMAT"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedFaceError(FormatError):
    code = "E_FACE"


class ValidationError(FlowCorrError, ValueError):
    code = "E_VALIDATION"


class TruncationError(FlowCorrError):
    code = "E_TRUNCATED"


class EmptySurfaceError(FlowCorrError):
    code = "E_EMPTY_SURFACE"


class SamplingError(FlowCorrError):
    code = "E_SAMPLING"


class ConnectivityError(FlowCorrError):
    code = "E_DISCONNECTED"

    def __init__(self, n_components):
        super().__init__(f"graph is disconnected ({n_components} components)")
        self.n_components = n_components


class ParameterError(FlowCorrError, ValueError):
    code = "E_PARAMETER"


class NumericError(FlowCorrError, ArithmeticError):
    code = "E_NUMERIC"


class ContractError(FlowCorrError):
    code = "E_CONTRACT"


class VersionError(FlowCorrError):
    code = "E_VERSION"
