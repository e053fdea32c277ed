"""Natural-form camera covariances for bundle-adjusted reconstructions."""
from .covariance import CovarianceResult, compute_covariance, full_covariance
from .errors import (CamcovError, FactorizationError, ProjectionError, RankDeficientCameraError,
                     SceneError, SingularPointBlockError, StageError)
from .nullspace import compute_nullspace, nullspace_residual
from .oracle import error_metric, pseudoinverse_covariance
from .projection import assemble_jacobian, project, project_points
from .scene import (Camera, Observation, Reconstruction, check_invariants, generate_cube_scene,
                    generate_desk_scene, generate_random_scene, load_reconstruction,
                    save_reconstruction)
from .subrec import approximate_covariances, build_view_graph, extract_neighborhood, monotonicity_check

__version__ = "0.1.0"
