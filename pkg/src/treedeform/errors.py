"""Exception types shared across the package.

Every error the library raises on bad input or a failed numerical
contract derives from TreedeformError, so callers (and the CLI) can
catch one base class and map it to an exit code.
"""


class TreedeformError(Exception):
    """Base class for all library errors."""


# geometry
class EmptyBlendSet(TreedeformError):
    """Blend called with no transforms."""


class AllZeroWeights(TreedeformError):
    """Blend called with a weight vector that sums to zero."""


# scaffold
class DisjointFrameRanges(TreedeformError):
    """Two motion bases share no frames."""


class KTooLarge(TreedeformError):
    """Neighbor count exceeds the number of bases."""


class NonPositiveRadius(TreedeformError):
    """Skinning radius must be strictly positive."""


class FrameOutOfRange(TreedeformError):
    """Requested frame lies outside the scaffold or node interval."""


# tree
class IntervalTooShort(TreedeformError):
    """Interval has fewer frames than the operation requires."""


class PartitionOutOfRange(TreedeformError):
    """Partition point is not strictly inside the frame range."""


class MissingAncestor(TreedeformError):
    """An ancestor node required for chain construction is absent."""


# optimize
class NoVisibleObservations(TreedeformError):
    """Track loss evaluated with zero visible (track, frame) pairs."""


class NonFiniteComponent(TreedeformError):
    """A loss component is NaN or infinite."""


class NonFiniteObjective(TreedeformError):
    """The optimization objective became NaN or infinite."""


# scene
class InvalidSpec(TreedeformError):
    """Synthetic scene specification violates its invariants."""


class TooFewDynamicTracks(TreedeformError):
    """Not enough dynamic tracks to initialize the requested scaffold."""


class ParseError(TreedeformError):
    """Malformed track or config file; message names the line."""


class MissingHeader(TreedeformError):
    """Track CSV does not start with the expected header."""


class NonContiguousFrames(TreedeformError):
    """Track rows are not in ascending frame order."""


# config
class ConfigError(TreedeformError):
    """Run configuration failed validation."""
