"""Exception hierarchy shared by all pipeline stages."""


class OtmetricError(Exception):
    """Base class for all package errors."""


class ConfigError(OtmetricError):
    """Bad or unknown configuration key/value. CLI exit code 2."""


class IoError(OtmetricError):
    """Missing or unreadable/unwritable file."""


class FormatError(OtmetricError):
    """Malformed field file or manifest (bad magic, truncation, size mismatch)."""


class GridMismatch(OtmetricError):
    """Operands live on different grids."""


class SingularMetric(OtmetricError):
    """Metric tensor is not positive-definite at some node."""


class NonpositiveDensity(OtmetricError):
    """Density must be strictly positive."""


class CompatibilityViolated(OtmetricError):
    """Source term has nonzero Riemannian mean beyond tolerance."""


class DegenerateDipole(OtmetricError):
    """Dipole endpoints coincide (supports overlap entirely)."""


class InvalidConfig(OtmetricError):
    """Probe layout or selection parameters are unusable."""


class NoAdmissibleTuple(OtmetricError):
    """No probe tuple meets the frame-determinant margin on a patch."""


class AdmissibilityViolated(OtmetricError):
    """Determinant/independence screen failed inside a patch."""


class IndefiniteCandidate(OtmetricError):
    """Orthocomplement candidate matrix is not positive-definite."""


class DisconnectedMask(OtmetricError):
    """Admissible region splits into several components; potential integration ill-posed."""


class UncoveredNodes(OtmetricError):
    """Patch cover leaves grid nodes with zero blending weight."""

    def __init__(self, holes):
        self.holes = holes
        super().__init__(f"{int(holes.sum())} nodes receive no patch weight")


class NotConverged(OtmetricError):
    """Iterative scheme stopped above tolerance."""

    def __init__(self, message, defect=None):
        self.defect = defect
        super().__init__(message)
