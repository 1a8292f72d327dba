# Builds the optional compiled scoring/raycast kernels. A plain
# `pip install -e . --no-build-isolation` compiles them; if the toolchain is
# unavailable the package still works through the numpy fallback in
# sparseslam._kernels.
import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext = Extension(
        "sparseslam._kernels._native",
        ["src/sparseslam/_kernels/_native.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
