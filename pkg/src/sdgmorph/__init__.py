"""Class-specific morphological augmentation with supervised contrastive
learning for single-domain generalisation, at desk scale."""

from .tensor import ContractError, DegenerateEmbeddingError, DomainError

__version__ = "0.1.0"
__all__ = ["ContractError", "DegenerateEmbeddingError", "DomainError", "__version__"]
