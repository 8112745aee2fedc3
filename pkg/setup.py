"""Build script for the optional compiled kernel backend.

The package works without the extension (a vectorized NumPy fallback is
selected at import time); set PROBPNP_SKIP_NATIVE=1 to skip compilation.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PROBPNP_SKIP_NATIVE"):
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "probpnp.backend._native",
                    ["src/probpnp/backend/_native.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )

setup(ext_modules=ext_modules)
