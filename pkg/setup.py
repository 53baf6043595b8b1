import pathlib

from setuptools import find_packages, setup


def read(name, encoding="utf-8"):
    filename = pathlib.Path(__file__).absolute().parent / name
    return open(filename, "r", encoding=encoding).read()


REQUIREMENTS = [
    "numpy>=1.22",
    "scipy>=1.9",
]

setup(
    name="mpg-toolkit",
    version="0.1.0",
    description="Check, solve and verify Markov potential games with parametric closed-loop policies",
    author="mpg-toolkit contributors",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    include_package_data=True,
    python_requires=">=3.9",
    install_requires=REQUIREMENTS,
    long_description_content_type="text/markdown",
    long_description=read("README.md"),
    entry_points={
        "console_scripts": [
            "mpg = mpg.cli:main",
        ]
    },
)
