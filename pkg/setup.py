"""Build shim for the optional compiled stepper.

The package is pure Python plus one Cython extension (xexlab.core._stepper)
holding the interpreter hot loop.  If the extension cannot be built the
package still installs and runs on the pure-Python engine, so the extension
is marked optional.
"""

import os

from setuptools import Extension, setup

try:
    if not os.path.exists("src/xexlab/core/_stepper.pyx"):
        raise ImportError("extension source not present")
    from Cython.Build import cythonize
    import numpy as np

    ext_modules = cythonize(
        [
            Extension(
                "xexlab.core._stepper",
                ["src/xexlab/core/_stepper.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
