"""
Setup script for Dense Face Alignment.
"""

from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="dense-face-alignment",
    version="0.1.0",
    author="Dense Face Alignment Team",
    author_email="dense-face@example.com",
    description="Dense face correspondence and morphable-model alignment from synthetic renders",
    long_description=long_description,
    long_description_content_type="text/markdown",
    url="https://github.com/dense-face/dense-face-alignment",
    packages=find_packages(),
    classifiers=[
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.20.0",
        "scipy>=1.6.0",
        "pyyaml>=5.4.0",
        "opencv-python>=4.5.0",
    ],
    extras_require={
        "dev": ["pytest>=6.0", "flake8>=3.9"],
    },
    entry_points={
        "console_scripts": [
            "dense-face=dense_face_alignment.main:main",
        ],
    },
)
