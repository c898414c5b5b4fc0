"""setuptools shim that drives the CMake build for the _core extension.

Use `pip install -e . --no-build-isolation` (or plain `pip install .`).
"""

import os
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class CMakeExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CMakeBuild(build_ext):
    def build_extension(self, ext):
        out_dir = Path(self.get_ext_fullpath(ext.name)).parent.resolve()
        build_dir = Path(self.build_temp).resolve()
        build_dir.mkdir(parents=True, exist_ok=True)
        source_dir = Path(__file__).parent.resolve()
        cfg = "Debug" if self.debug else "Release"
        subprocess.run(
            [
                "cmake",
                "-S", str(source_dir),
                "-B", str(build_dir),
                f"-DCMAKE_BUILD_TYPE={cfg}",
                f"-DPython3_EXECUTABLE={sys.executable}",
                "-DENHASR_PYTHON=ON",
            ],
            check=True,
        )
        subprocess.run(
            ["cmake", "--build", str(build_dir), "--target", "enhasr_core",
             "-j", str(os.cpu_count() or 2)],
            check=True,
        )
        built = build_dir / "python" / "enhasr" / "_core"
        produced = list((build_dir / "python" / "enhasr").glob("_core*.so"))
        if not produced:
            raise RuntimeError(f"extension not produced under {built}")
        dest = out_dir / "enhasr"
        dest.mkdir(parents=True, exist_ok=True)
        self.copy_file(str(produced[0]), str(dest / produced[0].name))


setup(
    name="enhasr",
    version="0.1.0",
    description="Speech-enhancement-assisted RNN-T: DSP, lattice loss, metrics",
    packages=["enhasr"],
    package_dir={"enhasr": "python/enhasr"},
    ext_modules=[CMakeExtension("enhasr._core")],
    cmdclass={"build_ext": CMakeBuild},
    python_requires=">=3.9",
    install_requires=["numpy"],
)
