"""Hand and object shape reconstruction from a few calibrated RGB views, via discrete latent cubes."""

__version__ = "0.1.0"
