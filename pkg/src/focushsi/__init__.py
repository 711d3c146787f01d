"""Spectral prompts and a sink token on a frozen ViT for gradient-free hyperspectral saliency."""

from .backbone import BackboneConfig, FrozenBackbone, init_frozen, load_backbone, save_backbone
from .explain import Explanation, evaluate, explain
from .hsi import BandPartition, HsiCube, Sample, SyntheticSpec, default_partition, generate_synthetic
from .metrics import EvalReport, auprc, bio_at_k, spatial_iou
from .model import FocusModel, FocusParams, init_params
from .saliency import SaliencyCube, build_cube, spatial_heatmap, spectral_curve
from .sink import HeadPartition, collapse_rate, select_aux_heads, sink_consistency, sink_loss, sink_rate
from .train import FitResult, NumericAbort, TrainConfig, fit

__version__ = "0.1.0"
