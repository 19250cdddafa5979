"""Wire-protocol inference backend over a Hugging Face causal LM."""

__version__ = "0.1.0"

from .app import create_app, load_templates, parse_consist_reply
from .model import AdapterConfig, CausalBackbone, TagBinding, TagBindingError

__all__ = [
    "AdapterConfig",
    "CausalBackbone",
    "TagBinding",
    "TagBindingError",
    "create_app",
    "load_templates",
    "parse_consist_reply",
]
