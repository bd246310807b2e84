"""Builds the optional Cython scan kernels.

The package imports fine without them; ``docmamba.kernels`` falls back to
NumPy when ``docmamba._scan_kernels`` is missing.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build without Cython
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "docmamba._scan_kernels",
                ["src/docmamba/_scan_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
