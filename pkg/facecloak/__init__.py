"""facecloak - pose-invariant facial privacy textures and retrieval evaluation"""

__version__ = "0.4.0"
