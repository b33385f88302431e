"""Global Sparse Momentum SGD: momentum-SGD training that prunes as it trains."""

__version__ = "0.1.0"
