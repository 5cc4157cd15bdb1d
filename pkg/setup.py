import numpy
from setuptools import Extension, setup

# The compiled kernels are an optional accelerator: if the extension fails to
# build, the package falls back to the numpy implementations at import time.
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "sipl.kernels._native",
                ["src/sipl/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-march=native"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

for ext in extensions:
    ext.optional = True

setup(ext_modules=extensions)
