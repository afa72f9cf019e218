"""Random sections of vector bundles: induced geometry, zero statistics and spectral ensembles."""
__version__ = "0.1.0"
