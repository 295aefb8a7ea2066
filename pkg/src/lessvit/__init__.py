"""Low-rank efficient spatial-spectral vision transformer for hyperspectral
geospatial rasters: patch embedding with physical position/wavelength
encodings, Kronecker-factored spatial-spectral attention with perception
field masking, masked-autoencoder pretraining, probe heads, a synthetic tile
pipeline, and instrumented complexity benchmarks.

Submodules load lazily so the command line can pin thread counts before any
numerical library initializes.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "data_io",
    "embedding",
    "attention",
    "hypermae",
    "heads",
    "config",
    "verify",
    "cli",
)

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
