import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension("segbench.kernels._ckernels", ["src/segbench/kernels/_ckernels.pyx"],
              include_dirs=[numpy.get_include()], optional=True,
              define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")]),
]

setup(ext_modules=cythonize(extensions, language_level=3))
