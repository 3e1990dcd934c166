"""Exception hierarchy shared by all pipeline stages."""


class MvposeError(Exception):
    """Base class for all errors raised by mvpose."""


class BehindCameraError(MvposeError, ValueError):
    """A point has non-positive depth in the camera frame."""


class DegenerateMeshError(MvposeError, ValueError):
    pass


class DegenerateFeatureError(MvposeError, ValueError):
    """A feature vector has zero norm, so cosine similarity is undefined."""


class UnstableTriangulationError(MvposeError, ValueError):
    """Two rays are too close to parallel to triangulate."""


class BehindCameraRejection(UnstableTriangulationError):
    """Closest approach of two rays lies behind both ray origins."""


class InsufficientViewsError(MvposeError, ValueError):
    pass


class UndefinedNormalError(MvposeError, ValueError):
    pass


class AmbiguousMeanError(MvposeError, ValueError):
    """Chordal rotation mean is rank deficient (e.g. antipodal inputs)."""


class UnderConstrainedError(MvposeError, ValueError):
    """Fewer scalar residuals than pose degrees of freedom."""


class NonConvergenceError(MvposeError, RuntimeError):
    """LM failed to solve the normal equations repeatedly.

    The best pose found so far is attached as ``best_pose``.
    """

    def __init__(self, message, best_pose=None):
        super().__init__(message)
        self.best_pose = best_pose


class ManifestError(MvposeError, ValueError):
    pass
