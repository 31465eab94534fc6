"""Black-box privacy auditing of DP-SGD in a single training run."""

__version__ = "0.1.0"
