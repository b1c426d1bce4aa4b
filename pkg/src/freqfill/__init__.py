"""freqfill: desk-scale reference-guided inpainting sandbox."""

__version__ = "0.1.0"

from .errors import ContractViolation, NumericFault

__all__ = ["ContractViolation", "NumericFault", "__version__"]
