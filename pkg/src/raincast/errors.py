"""Exception hierarchy shared by all raincast modules.

Every error raised by the library derives from :class:`RaincastError`, so
callers (notably the CLI) can catch one type and report a structured message.
Error classes are named after the failure they signal; messages carry the
file / sample / frame context needed to locate the offending input.
"""


class RaincastError(Exception):
    """Base class for all raincast errors."""


# --- raster I/O ---

class BadMagic(RaincastError):
    """File does not start with the NWG1 magic bytes."""


class UnsupportedVersion(RaincastError):
    """NWG1 header declares a version this reader does not understand."""


class TruncatedPayload(RaincastError):
    """Declared payload size does not match the bytes present."""


class IoFailure(RaincastError):
    """Underlying OS-level read/write failure."""


class PadTooLarge(RaincastError):
    """Reflection pad width would require repeating edge pixels."""


class BadTarget(RaincastError):
    """Requested crop window is invalid for the given grid."""


# --- preprocessing ---

class BadSelection(RaincastError):
    """Channel selection indices are empty, duplicated, or out of range."""


class ConstantChannel(RaincastError):
    """A channel has zero variance; correlation is undefined."""


class DegenerateHistogram(RaincastError):
    """Constant input; Otsu threshold is undefined."""


class WrongKind(RaincastError):
    """Grid kind does not match the requested transformation."""


class Misaligned(RaincastError):
    """Paired stacks disagree in timing, count, or resolution."""


# --- optical flow ---

class SizeMismatch(RaincastError):
    """Frames or fields that must share dimensions do not."""


class InconsistentFeatures(RaincastError):
    """Pairwise sparse flows were not computed on a common feature set."""


class EmptySparse(RaincastError):
    """No sparse vectors available for densification."""


class SingularSystem(RaincastError):
    """RBF system is singular even after ridge regularisation."""


# --- cGAN ---

class ShapeMismatch(RaincastError):
    """Tensor shape violates an architecture contract."""


class NonFiniteLoss(RaincastError):
    """A training loss became NaN or infinite."""


class EmptyDataset(RaincastError):
    """Training requires at least one sample pair."""


# --- evaluation ---

class FairNeedsTwo(RaincastError):
    """The fair CRPS estimator needs at least two ensemble members."""


# --- CLI ---

class ConfigError(RaincastError):
    """Run configuration is invalid (unknown key, bad type, missing path)."""
