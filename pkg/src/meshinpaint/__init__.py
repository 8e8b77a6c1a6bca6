"""Self-supervised mesh inpainting with graph convolutional networks.

The network is fitted to the single input mesh: random fake holes are cut
out of the known region and the network learns to predict the displacement
from an oversmoothed fill back to the surface. A sparse least-squares
refinement then merges the prediction with the known geometry.
"""
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    LossUndefinedError,
    MeshDataError,
    MeshFormatError,
    MeshInpaintError,
    MeshStructureError,
    NumericError,
    SimplificationError,
    StateError,
)
from .mesh import Mesh
from .io import load_mesh, save_mesh
from .preprocess import HoleMask, PreprocessConfig
from .hierarchy import ProgressiveHierarchy, build_hierarchy
from .gcn import GcnModel, GraphContext, ModelConfig, grad_check
from .losses import BnfParams, LossWeights, total_loss
from .pipeline import (
    AugmentationConfig,
    MetricsReport,
    TrainConfig,
    build_problem,
    compute_metrics,
    evaluate,
    gen_fake_holes,
    train,
)

__version__ = "0.1.0"
