"""Build script for the compiled kernel core.

The extension is optional: if Cython or a C compiler is unavailable the
package installs as pure Python and falls back to the numpy kernels at
import time (see power_attention.kernels).
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "power_attention._core",
                sources=["src/power_attention/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
