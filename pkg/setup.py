"""Build script: compiles the optional fast kernels.

The compiled extension is a pure accelerator; if the build toolchain is
unavailable (or PAALIGN_NO_EXT=1 is set) the package installs without it and
falls back to the numpy implementation at import time.
"""
import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("PAALIGN_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "paalign._kernels._fast",
                    ["src/paalign/_kernels/_fast.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except Exception as exc:  # noqa: BLE001 - any build-chain failure degrades gracefully
        sys.stderr.write("paalign: building without compiled kernels (%s)\n" % exc)
        ext_modules = []

setup(ext_modules=ext_modules)
