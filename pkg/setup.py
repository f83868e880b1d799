"""Build the optional compiled kernel core.

    python setup.py build_ext --inplace

Without Cython (or a C toolchain) the package installs fine and falls
back to the numpy kernels at import time. -ffp-contract=off keeps the
compiled float32 arithmetic bit-identical to the numpy backend (no FMA
contraction).
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "obmerge._kernels",
                sources=["src/obmerge/_kernels.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
