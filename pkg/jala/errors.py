"""Exception hierarchy for jala-desk.

Every error carries a one-line message. The CLI prints ``error: <kind>: <msg>``
using ``kind`` below.
"""


class JalaError(Exception):
    kind = "jala"


class ConfigError(JalaError, ValueError):
    kind = "config"


class ShapeError(JalaError, ValueError):
    kind = "shape"


class EmptyResultError(JalaError, ValueError):
    kind = "empty"


class DataError(JalaError, ValueError):
    kind = "data"


class NonFiniteError(JalaError, ArithmeticError):
    kind = "non-finite"


class NotTrainedError(JalaError, RuntimeError):
    kind = "not-trained"


class CheckpointError(JalaError, RuntimeError):
    kind = "checkpoint"
