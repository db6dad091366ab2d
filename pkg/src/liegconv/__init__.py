"""Group convolutions on affine Lie groups with continuous SIREN kernels."""

__version__ = "0.1.0"
