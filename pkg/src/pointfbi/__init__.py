"""Feature-norm influence maps for PointNet-style point-cloud classifiers."""

from .data import (
    CLASSES,
    Dataset,
    KnnGraph,
    PointCloud,
    add_global_outliers,
    build_knn_graph,
    generate_shape,
    make_dataset,
    normalize,
    read_xyz,
    rotate,
    write_ply,
    write_xyz,
)
from .errors import ContractError, DimensionError, FormatError, ParseError
from .network import ModelBundle, ModelConfig, forward, load_model, save_model, train
from .xai import (
    InfluenceMap,
    critical_points,
    fbi,
    fbi_p,
    gradient_saliency,
    integrated_gradients,
    random_ranking,
)

__version__ = "0.1.0"
