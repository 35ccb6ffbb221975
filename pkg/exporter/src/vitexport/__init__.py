"""Thin exporter turning images into OSTF feature/attention tensor files via
a self-supervised ViT backbone."""

from .backbone import MiniVit, VitBackbone, load_model
from .export import ExportManifest, export_dataset, export_image, load_image_tensor
from .ostf import KIND_ATTENTION_STACK, KIND_FEATURE_MAP, write_ostf

__version__ = "0.1.0"
