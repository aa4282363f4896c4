import numpy
from setuptools import Extension, setup

# -ffp-contract=off: keep scalar float ops bit-identical to the pure-Python
# fallback (no fused multiply-add), so both backends agree exactly.
extensions = [
    Extension(
        "lmbridge._kernels._ckernels",
        ["src/lmbridge/_kernels/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    ),
]

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(extensions, language_level=3)
except ImportError:
    # No Cython: the package still works on the pure-Python kernel fallback.
    ext_modules = []

setup(ext_modules=ext_modules)
