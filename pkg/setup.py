"""Build script: compiles the optional scoring extension when Cython is available.

The package is fully functional without the extension (a numpy fallback is
selected at import time); `python setup.py build_ext --inplace` builds it
explicitly for benchmarking.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "tablefill._kernels._scoring",
                sources=["src/tablefill/_kernels/_scoring.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
