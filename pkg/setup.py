import os

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - fallback backend is used instead
    cythonize = None


class OptionalBuildExt(build_ext):
    """Never fail the install because the compiled core did not build."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover
            print(f"warning: compiled kernels not built ({exc}); numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover
            print(f"warning: failed to build {ext.name} ({exc}); numpy fallback will be used")


openmp = [] if os.environ.get("GAUSSSURF_NO_OPENMP") else ["-fopenmp"]
extensions = []
if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "gausssurf._raster_ext",
                ["src/gausssurf/_raster_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"] + openmp,
                extra_link_args=openmp,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions, cmdclass={"build_ext": OptionalBuildExt})
