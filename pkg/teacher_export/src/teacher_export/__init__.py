"""Offline exporter of frozen teacher embeddings to RCEMB1 files."""

from .encoders import EncoderUnavailable, MissingAsset, resolve_encoder
from .exporter import ExportJob, export_embeddings, prompt_strings
from .formats import FormatError, read_rcemb, read_rcpts, write_rcemb

__version__ = "0.1.0"
