from setuptools import Extension, setup

# The compiled kernels are optional: the package falls back to the pure
# numpy implementations in admmforge.kernels.fallback when the extension
# is missing or fails to build.
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "admmforge._ckernels",
                ["src/admmforge/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
