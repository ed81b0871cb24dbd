import os

from setuptools import setup

ext_modules = []
if os.environ.get("INTENTMINE_SKIP_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "intentmine.kernels._fast",
                    ["src/intentmine/kernels/_fast.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # no Cython toolchain: install pure-Python only, kernels fall back
        ext_modules = []

setup(ext_modules=ext_modules)
