"""Build the optional compiled core; the package falls back to numpy without it."""
import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    cythonize = None


def _extensions():
    if cythonize is None or os.environ.get("FALKON_OOC_NO_EXT"):
        return []
    openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
    # gcc vectorizes exp() against glibc's libmvec under -ffast-math
    libraries = ["m", "mvec"] if sys.platform.startswith("linux") else []
    ext = Extension(
        "falkon_ooc._fused",
        ["src/falkon_ooc/_fused.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffast-math", "-march=native", *openmp],
        extra_link_args=openmp,
        libraries=libraries,
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions())
