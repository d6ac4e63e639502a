"""Build script for the optional compiled codec.

The package is fully functional without the extension; `metaros.envelope`
falls back to its pure-Python codec when `metaros._codec` is absent.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "metaros._codec",
                ["src/metaros/_codec.pyx"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
