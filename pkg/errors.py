"""Exception types shared by the mesh translator modules."""


class MeshTranslatorError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(MeshTranslatorError, ValueError):
    """An array or tensor does not have the shape an operation requires."""


class DegenerateCloud(MeshTranslatorError):
    """Similarity alignment is undefined because the target cloud has zero variance."""


class DegenerateFace(MeshTranslatorError):
    """A triangle has zero area, so its normal is undefined."""


class NonFinite(MeshTranslatorError):
    """A loss term or parameter became NaN or infinite."""


class ConfigError(MeshTranslatorError, ValueError):
    """A configuration file or value is invalid."""


class DatasetFormatError(MeshTranslatorError):
    """A dataset file does not follow the documented binary layout."""


class SampleOutOfRange(MeshTranslatorError, IndexError):
    """A sample index lies outside the dataset."""


class OutOfFrame(UserWarning):
    """Too many vertices project outside the rendered image."""


def expect_shape(name: str, actual, expected) -> None:
    """Raise ShapeMismatch unless `actual` matches `expected` (None entries match anything)."""
    actual = tuple(actual)
    if len(actual) != len(expected) or any(
        e is not None and a != e for a, e in zip(actual, expected)
    ):
        raise ShapeMismatch(f"{name}: expected shape {tuple(expected)}, got {actual}")
