"""Exception hierarchy shared across the package.

Every domain error carries a stable ``code`` string so the CLI and HTTP
service can surface machine-readable error bodies without string matching.
"""


class SceneWalkError(Exception):
    """Base class for all domain errors."""

    code = "SceneWalkError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


# --- scene graph ---

class DuplicateHandle(SceneWalkError):
    code = "DuplicateHandle"


class MissingParentRegion(SceneWalkError):
    code = "MissingParentRegion"


class InvalidEdgeKind(SceneWalkError):
    code = "InvalidEdgeKind"


class MaskSizeMismatch(SceneWalkError):
    code = "MaskSizeMismatch"


class MaskSubsetViolation(SceneWalkError):
    code = "MaskSubsetViolation"


class NotLevelThree(SceneWalkError):
    code = "NotLevelThree"


class UnknownEdge(SceneWalkError):
    code = "UnknownEdge"


class UnknownHandle(SceneWalkError):
    code = "UnknownHandle"


class MutedEndpoint(SceneWalkError):
    code = "MutedEndpoint"


class SegmentationEmpty(SceneWalkError):
    code = "SegmentationEmpty"


class SchemaVersionMismatch(SceneWalkError):
    code = "SchemaVersionMismatch"


class CorruptMask(SceneWalkError):
    code = "CorruptMask"


class CorruptDocument(SceneWalkError):
    code = "CorruptDocument"


# --- diffusion backend ---

class TimestepOutOfRange(SceneWalkError):
    code = "TimestepOutOfRange"


class ShapeMismatch(SceneWalkError):
    code = "ShapeMismatch"


class UnknownToken(SceneWalkError):
    code = "UnknownToken"


# --- customization ---

class MissingMap(SceneWalkError):
    code = "MissingMap"


class MissingMask(SceneWalkError):
    code = "MissingMask"


class EmptyGraph(SceneWalkError):
    code = "EmptyGraph"


class DivergedLoss(SceneWalkError):
    code = "DivergedLoss"


class OutpaintFailure(SceneWalkError):
    code = "OutpaintFailure"


# --- outpaint ---

class EmptyImage(SceneWalkError):
    code = "EmptyImage"


class AllUnknownWithoutPrompt(SceneWalkError):
    code = "AllUnknownWithoutPrompt"


# --- geometry ---

class NonPositiveDepth(SceneWalkError):
    code = "NonPositiveDepth"


class EmptyScene(SceneWalkError):
    code = "EmptyScene"


class DegenerateFit(SceneWalkError):
    code = "DegenerateFit"


# --- pipeline / eval / service ---

class TrajectoryExhausted(SceneWalkError):
    code = "TrajectoryExhausted"


class ConstructionDiverged(SceneWalkError):
    code = "ConstructionDiverged"


class EmptySet(SceneWalkError):
    code = "EmptySet"


class SessionBusy(SceneWalkError):
    code = "SessionBusy"


class UnknownSession(SceneWalkError):
    code = "UnknownSession"
