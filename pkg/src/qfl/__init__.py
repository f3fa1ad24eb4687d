"""Shape-constrained quantile fused LASSO for panels of option prices."""

__version__ = "0.1.0"
