"""Online Continual-MAML adaptation of a neural vehicle-dynamics model inside MPPI, on a simulated track."""

__version__ = "0.1.0"
