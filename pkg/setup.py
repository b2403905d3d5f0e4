"""Build the optional Cython kernel; the package still installs without it."""
import numpy as np
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "salora._kernels",
                ["src/salora/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math / -march=native: summation order must stay fixed
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
