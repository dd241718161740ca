"""Build the optional Cython kernels; the package falls back to NumPy without them."""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PFEDGM_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "pfedgm._ckernels",
                    ["src/pfedgm/_ckernels.pyx"],
                    extra_compile_args=["-O3"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
