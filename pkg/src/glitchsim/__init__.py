"""Cycle-level simulation of a sensor-guided power-glitch attack on an FPGA DNN accelerator."""

__version__ = "0.1.0"
