"""Error taxonomy shared by every module.

Each error carries a short category tag so the CLI and service can prefix
messages uniformly (``format: ...``, ``io: ...``) and map them to exit codes
or HTTP statuses without inspecting types.
"""

from __future__ import annotations


class GradmergeError(Exception):
    """Base class; ``category`` is one of format/consistency/validation/io/lookup."""

    category = "error"

    def __str__(self) -> str:  # pragma: no cover - trivial
        return super().__str__()


class FormatError(GradmergeError):
    """Malformed checkpoint file: bad header, offsets, dtypes."""

    category = "format"


class ConsistencyError(GradmergeError):
    """Inputs that individually parse but disagree with each other."""

    category = "consistency"


class ValidationError(GradmergeError):
    """Semantically invalid values: negative importance, bad recipe fields."""

    category = "validation"


class IoError(GradmergeError):
    """Filesystem failures: unwritable paths, missing files."""

    category = "io"


class TensorLookupError(GradmergeError):
    """Unknown tensor name."""

    category = "lookup"
