"""External tile embedder for slidebench feature extraction.

Speaks the handoff protocol (tiles dir + manifest in, one HDF5 feature
file out) and nothing else; the only coupling to the pipeline is the
documented file formats.
"""

from .adapter import AdapterConfig, AdapterError, run_adapter
from .models import register_model, stub_embed

__all__ = [
    "AdapterConfig",
    "AdapterError",
    "run_adapter",
    "register_model",
    "stub_embed",
]
