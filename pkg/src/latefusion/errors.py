"""Exception hierarchy for the latefusion package.

The CLI maps these onto process exit codes, so library code should raise the
most specific class that applies:

* :class:`UsageError` — bad configuration keys/values or malformed command
  invocations (exit code 1).
* :class:`DataError` — structurally broken or mutually inconsistent input
  data, e.g. a detection file whose frame has no ground truth (exit code 2).
* :class:`ParseError` — unreadable file contents; a subclass of
  :class:`DataError` because it signals corrupt input data.
* :class:`ContractError` — a caller violated an API precondition, e.g.
  passing a gradient cache that does not match the tensor it came from
  (exit code 3).
"""


class LateFusionError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(LateFusionError):
    """Invalid configuration or command usage."""


class DataError(LateFusionError):
    """Input data is missing, inconsistent, or fails integrity checks."""


class ParseError(DataError):
    """A file could not be parsed; message names the file/line/key."""


class ContractError(LateFusionError):
    """An API precondition was violated by the caller."""
