# SPDX-License-Identifier: Apache-2.0
from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

core_sources = [
    "src/collectives.cpp",
    "src/fusion.cpp",
    "src/gradient_pool.cpp",
    "src/half.cpp",
    "src/harness.cpp",
    "src/inproc.cpp",
    "src/sparse.cpp",
    "src/tcp.cpp",
    "src/trainer.cpp",
    "src/transport.cpp",
]

setup(
    ext_modules=[
        Pybind11Extension(
            "gflowpy",
            ["bindings/module.cpp"] + core_sources,
            include_dirs=["include", "vendor"],
            cxx_std=20,
        )
    ],
    cmdclass={"build_ext": build_ext},
)
