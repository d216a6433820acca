from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the fallback kernel is used
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "tbpinn._bs_core",
                ["src/tbpinn/_bs_core.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
