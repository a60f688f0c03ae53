"""Build script for the optional compiled kernel core.

The package is fully functional without the extension; the pure-Python
kernels are selected automatically at import when ``crossad.kernels._core``
is missing.  Build in place with::

    python setup.py build_ext --inplace

``-ffp-contract=off`` is mandatory: the compiled kernels promise bit-identical
results to the pure-Python backend, and fused multiply-add would break that.
"""

from setuptools import Extension, setup

extensions = []
try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "crossad.kernels._core",
                sources=["src/crossad/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O2", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    pass

setup(ext_modules=extensions)
