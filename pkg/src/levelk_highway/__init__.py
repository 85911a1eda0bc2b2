"""Level-k highway driver policies: training, simulation and data validation."""

__version__ = "0.1.0"
