"""
emomine Setup Script
Installs the emomine modules and the `emomine` command
"""

from setuptools import setup
import os

# Read README if it exists
def read_readme():
    if os.path.exists("README.md"):
        with open("README.md", "r", encoding="utf-8") as f:
            return f.read()
    return "emomine - mine weakly labeled emotional speech from subtitled movies and train a Bi-GRU on it"

# Read requirements
def read_requirements():
    if os.path.exists("requirements.txt"):
        with open("requirements.txt", "r") as f:
            return [line.strip() for line in f if line.strip() and not line.startswith("#")]
    return []

setup(
    name="emomine",
    version="0.1.0",
    description="Weakly supervised emotional speech corpus mining and Bi-GRU transfer learning",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    author="emomine developers",
    py_modules=[
        "srt_parser",
        "sentiment",
        "corpus",
        "features",
        "neural",
        "transfer_eval",
        "synthetic",
        "emomine_config",
        "emomine_errors",
        "emomine_cli",
    ],
    include_package_data=True,
    data_files=[("share/emomine", ["data/demo_lexicon.tsv", "data/example_config.yaml"])],
    install_requires=read_requirements(),
    extras_require={
        # Independent autograd oracle for the GRU gradient tests
        "test": ["torch>=2.1.0"],
    },
    entry_points={
        "console_scripts": [
            "emomine=emomine_cli:main",
        ],
    },
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Multimedia :: Sound/Audio :: Speech",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    keywords="speech emotion recognition subtitles sentiment gru transfer-learning",
    python_requires=">=3.9",
)
