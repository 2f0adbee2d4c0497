"""Hybrid CTC/attention end-to-end speech recognition on a small numpy autodiff engine."""

__version__ = "0.1.0"
