"""moe-exporter: dump MoE layer geometry inputs from pretrained checkpoints."""

__version__ = "0.1.0"

from .adapters import (
    HfSparseMoeAdapter,
    MgtCheckpointAdapter,
    UnsupportedArchitectureError,
    load_adapter,
)
from .export import ExportSpec, JacobianMean, export, expert_jacobian_at
