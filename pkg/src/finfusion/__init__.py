"""Multimodal financial forecasting, systemic-risk early warning, and a
risk-aware trading policy, built on a small numpy autodiff core and trained
entirely on synthetic data with planted cross-modal structure."""

__version__ = "0.1.0"
