"""bidicap: a compact bidirectional captioning transformer on a numpy
autodiff core, with numba-accelerated kernels and a pure-numpy fallback
(select via the BIDICAP_BACKEND environment variable)."""

__version__ = "0.1.0"

from .errors import BidicapError  # noqa: F401
