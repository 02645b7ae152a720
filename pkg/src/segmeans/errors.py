"""Exception types shared across the package."""


class SegmeansError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SegmeansError):
    """Operands have incompatible dimensions."""


class ConfigError(SegmeansError):
    """Model configuration or execution plan is inconsistent."""


class PartitionError(SegmeansError):
    """Sequence cannot be partitioned or segmented as requested."""


class ProtocolError(SegmeansError):
    """Collective participants disagree on payload shape or size."""


class DeadlockError(SegmeansError):
    """A collective barrier timed out waiting for a participant."""


class TransportError(SegmeansError):
    """A collective exchange failed while a forward pass depended on it."""


class CalibrationError(SegmeansError):
    """Cost-model fitting failed; the message names the offending parameter."""


class PolicyError(SegmeansError):
    """The runtime selector has no usable candidate plan."""


class MapLookupError(SegmeansError):
    """A performance-map query fell outside the profiled grid."""


class MapFormatError(SegmeansError):
    """A performance-map file is malformed."""


class MapVersionError(MapFormatError):
    """A performance-map file uses an unsupported schema version."""
