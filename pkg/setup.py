"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so any build failure here is demoted to a warning.
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "sgfem._cheb_kernel",
                ["src/sgfem/_cheb_kernel.pyx"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"warning: skipping Cython kernel build ({exc}); "
          "pure-python fallback will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
