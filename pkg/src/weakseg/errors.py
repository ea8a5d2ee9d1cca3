"""Exception types that map onto the CLI's exit-code contract."""


class DataError(Exception):
    """Bad or missing input data / configuration (CLI exit code 3)."""


class NumericError(Exception):
    """Runtime numeric failure such as NaN/Inf losses (CLI exit code 4)."""
