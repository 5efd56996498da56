"""Multi-domain Barlow Twins pretraining and segmentation fine-tuning in plain numpy."""
from .autodiff import Parameter, Tape, Tensor, grad_check
from .errors import BarlowTupleError
from .ssl_loss import EmbeddingBatch, TupleLossConfig, barlow_tuple_loss, barlow_twins_loss, cross_correlation

__version__ = "0.1.0"

__all__ = [
    "BarlowTupleError", "EmbeddingBatch", "Parameter", "Tape", "Tensor", "TupleLossConfig",
    "barlow_tuple_loss", "barlow_twins_loss", "cross_correlation", "grad_check",
]
