"""Builds the native module with cargo and places it where setuptools
expects an extension. Install editable from the repository root with:

    pip install -e python/ --no-build-isolation
"""

import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class CargoExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CargoBuild(build_ext):
    def build_extension(self, ext):
        workspace = Path(__file__).resolve().parent.parent
        subprocess.run(
            [
                "cargo",
                "build",
                "--release",
                "-p",
                "pmcl-py",
                "--features",
                "extension-module",
            ],
            cwd=workspace,
            check=True,
        )
        built = workspace / "target" / "release" / "lib_pmcl.so"
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, dest)


setup(
    ext_modules=[CargoExtension("pmcl_py._pmcl")],
    cmdclass={"build_ext": CargoBuild},
)
