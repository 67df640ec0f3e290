"""Online identification of power-grid admittance matrices."""
__version__ = "0.1.0"
