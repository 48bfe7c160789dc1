"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time); set MARKOVFLOW_NO_EXT=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("MARKOVFLOW_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext = Extension(
            "markovflow._kernels",
            sources=["src/markovflow/_kernels.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        )
        ext_modules = cythonize(
            [ext],
            compiler_directives={
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "language_level": "3",
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
