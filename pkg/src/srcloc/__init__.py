"""EEG source-localization workbench: forward model, inverse solvers, refinement network, metrics."""

__version__ = "0.1.0"
