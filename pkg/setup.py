"""Build script: compiles the optional Cython stencil kernels.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any build failure here downgrades to a warning.
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "conemaflow._kernels._stencil",
                ["src/conemaflow/_kernels/_stencil.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"conemaflow: skipping Cython kernels ({exc}); numpy fallback will be used\n")

setup(ext_modules=ext_modules)
