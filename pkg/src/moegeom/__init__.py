"""moegeom: geometry diagnostics for Mixture-of-Experts layers.

Measures cross-expert Jacobian alignment in function space and routed-PCA /
Grassmann subspace separation in representation space, and ships a small
trainable MoE transformer for controlled top-k vs fully-soft routing
experiments.
"""

__version__ = "0.1.0"

from .errors import (
    BoundsError,
    DegenerateInputError,
    DegenerateWeightsError,
    DumpFormatError,
    IncompatibleReportsError,
    InsufficientDataError,
    NotFoundError,
    NumericError,
    ShapeError,
    ToolkitError,
    TrainingDivergedError,
)
from .svd import thin_svd
from .geometry import (
    PcaResult,
    Stats,
    Subspace,
    grassmann_distance,
    grassmann_max,
    offdiag_stats,
    pairwise_metric_matrix,
    principal_angles,
    variance_profile,
    vectorized_cosine,
    weighted_pca,
)
from .model import (
    CaptureBuffer,
    ExpertMlp,
    ModelConfig,
    MoeLayer,
    RouterKind,
    TransformerModel,
    expert_forward,
    expert_jacobian,
    gelu,
    gelu_prime,
    model_forward,
    moe_forward,
    route,
    run_capture,
)
from .train import Adam, loss_and_grads, softmax_cross_entropy, train
from .pipeline import (
    DumpActivationSource,
    ExpertJacobianStat,
    GeometryReport,
    ModelActivationSource,
    RoutedActivations,
    Spectrum,
    analyze_layer,
    analyze_source,
    collect,
    compare_routing,
    jacobian_alignment,
    routing_entropy,
    spectra_report,
    subspace_report,
)
from .interchange import (
    DumpContainer,
    capture_dump_container,
    format_mean_std,
    load_checkpoint,
    load_dump,
    read_dump,
    read_report,
    report_from_dict,
    report_to_dict,
    save_checkpoint,
    save_dump,
    write_dump,
    write_plot_csv,
    write_report,
)
