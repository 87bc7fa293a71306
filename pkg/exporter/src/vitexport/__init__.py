"""ViT activation exporter: forward-hook capture into .npy bundles."""

from .capture import (BLOCK_SITES, ExportError, available_sites, export_activations,
                      export_gradients, gradient_health)
from .model import MODEL_REGISTRY, ModelLoadError, VisionTransformer, build_model
from .npyio import write_npy_f32

__version__ = "0.1.0"
