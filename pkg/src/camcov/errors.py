"""Exception types raised across the pipeline."""


class CamcovError(Exception):
    """Base class for all errors raised by camcov."""


class SceneError(CamcovError):
    """Malformed scene file or a reconstruction that violates an invariant."""


class ProjectionError(CamcovError):
    """A point lies behind (or on) the image plane of the observing camera."""


class RankDeficientCameraError(CamcovError):
    def __init__(self, camera, rcond):
        super().__init__(
            f"camera {camera}: rotation nullspace system is rank deficient "
            f"(reciprocal condition {rcond:.3e})")
        self.camera = camera
        self.rcond = rcond


class SingularPointBlockError(CamcovError):
    def __init__(self, point, detail=""):
        super().__init__(f"point {point}: 3x3 information block is singular "
                         f"(under-constrained point){detail}")
        self.point = point


class FactorizationError(CamcovError):
    """Symmetric indefinite factorization of the reduced system failed."""


class StageError(CamcovError):
    """Wraps the first failing stage of ``compute_covariance``."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
