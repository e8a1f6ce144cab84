"""Builds the optional compiled kernels.

python setup.py build_ext --inplace
Set REPSPARK_NO_EXT=1 to skip the extension and ship the numpy fallback only.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("REPSPARK_NO_EXT"):
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "repspark._ckernels",
                ["src/repspark/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: keeps results bit-identical to the numpy path
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
