import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# SRFRN_PURE=1 skips the compiled kernels entirely; the package then runs on
# the numpy fallback selected at import time.
ext_modules = []
if cythonize is not None and os.environ.get("SRFRN_PURE") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "srfrn.kernels._fastconv",
                ["src/srfrn/kernels/_fastconv.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
