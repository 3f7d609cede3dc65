"""Edge-aware point-cloud consolidation and feature-line aligned meshing."""

__version__ = "0.1.0"

from .cloud import (AffineRecord, NeighborQuery, OrientedCloud, PipelineConfig,
                    PointLabel, average_gap, build_index, normalize)
from .consolidate import ProjectionResult, augment, project_all, \
    project_to_edge, refine_positions, regularize_normals
from .denoise import DenoiseState, denoise, init_normals, local_covariance, \
    orient_normals
from .edge_zone import EdgeZoneReport, classify, edge_zone_report, omt_cost, \
    profile_scan
from .errors import (DegenerateInput, DuplicateSite, Infeasible, InvalidInput,
                     NonManifoldOutput, NumericalFailure, RfepsError)
from .mesh import TriangleMesh, validate_mesh
from .metrics import MetricsReport, edge_filter, edge_metrics, full_report, \
    mesh_metrics, one_sided_cd
from .pipeline import PipelineResult, StageTiming, run_pipeline, sweep
from .rpd import BaseSurface, RestrictedPowerDiagram, WeightedSite, \
    compute_rpd, extract_dual, project_sites
from .solver import ConstrainedProblem, SolveStatus, SphericalNormal, \
    check_gradient, minimize
from .synth import SyntheticSpec, make_synthetic
