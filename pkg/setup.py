# Builds the compiled convolution kernels. The package works without them
# (pure-NumPy fallback is selected at import), so a failed extension build
# only costs speed, not functionality.
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "sqakd.kernels._ckernels",
                ["src/sqakd/kernels/_ckernels.pyx"],
                # Reassociation flags let the compiler vectorize the FP
                # accumulation loops; NaN/Inf semantics stay intact (no
                # -ffinite-math-only).
                extra_compile_args=[
                    "-O3",
                    "-fassociative-math",
                    "-fno-signed-zeros",
                    "-fno-trapping-math",
                ],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
