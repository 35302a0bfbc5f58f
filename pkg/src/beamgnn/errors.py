"""Exception types shared across the package."""


class BeamGnnError(Exception):
    """Base class for all package errors."""


class InvalidParams(BeamGnnError, ValueError):
    """A BeamParams / spec field is outside its admissible set."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class InvertedElement(BeamGnnError):
    """A mapped tetrahedron has non-positive volume (template bug)."""


class InvalidMaterial(BeamGnnError, ValueError):
    pass


class DegenerateElement(BeamGnnError, ValueError):
    pass


class NoConvergence(BeamGnnError):
    def __init__(self, max_iters, residual, sample_index=None):
        self.max_iters = max_iters
        self.residual = residual
        self.sample_index = sample_index
        where = "" if sample_index is None else f" (sample {sample_index})"
        super().__init__(
            f"CG did not converge in {max_iters} iterations, "
            f"relative residual {residual:.3e}{where}"
        )


class DatasetFormatError(BeamGnnError):
    pass


class BadMagic(DatasetFormatError):
    pass


class UnsupportedVersion(DatasetFormatError):
    pass


class TruncatedFile(DatasetFormatError):
    pass


class ChecksumMismatch(DatasetFormatError):
    pass


class ZeroTruthNorm(BeamGnnError, ValueError):
    pass


class NonFiniteGradient(BeamGnnError, FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class NonFiniteLoss(BeamGnnError, FloatingPointError):
    pass


class ConfigMismatch(BeamGnnError, ValueError):
    pass


class CheckpointFormatError(BeamGnnError):
    pass
