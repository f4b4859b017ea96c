"""Thruster-assisted planar biped: HZD single support, reference governor and double-support NMPC."""

__version__ = "0.1.0"
