"""3D SIMP topology optimization on structured hexahedral grids."""

__version__ = "0.1.0"
