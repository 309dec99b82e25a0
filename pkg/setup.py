import os

import numpy as np
from setuptools import Extension, setup

# BSEELAB_NO_EXT=1 skips the compiled core; the numpy fallback is used at import.
if os.environ.get("BSEELAB_NO_EXT"):
    ext_modules = []
else:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "bseelab._kernels",
                ["src/bseelab/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O2", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
