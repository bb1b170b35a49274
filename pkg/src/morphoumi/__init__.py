"""Low-rank morphometry decomposition, ROI selection and univariate index scoring."""

from .io import FeatureMatrix, load_cohort
from .mesh import TriangleMesh, load_mesh, sphere_mesh
from .pipeline import run_pipeline
from .roi import RoiConfig, extract_roi, permutation_t_test
from .solver import SolverConfig, decompose
from .synthetic import SyntheticSpec, generate_synthetic
from .umi import build_template, umi, umi_batch

__version__ = "0.1.0"

__all__ = ["FeatureMatrix", "RoiConfig", "SolverConfig", "SyntheticSpec", "TriangleMesh",
           "build_template", "decompose", "extract_roi", "generate_synthetic", "load_cohort",
           "load_mesh", "permutation_t_test", "run_pipeline", "sphere_mesh", "umi", "umi_batch"]
