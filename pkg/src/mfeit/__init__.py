"""mfEIT workbench: simulate a 16-electrode sensor, generate multi-frequency
phantom datasets, and reconstruct conductivity-change images with one-step
Gauss-Newton, MMV-ADMM, or the unrolled reconstruction network."""

from mfeit.errors import ConfigError, DataFormatError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataFormatError", "NumericalError", "__version__"]
