"""Hybrid EIT reconstruction: CEM forward solver, voltage-to-potential U-Net, PINN inverse step."""

__version__ = "0.1.0"
