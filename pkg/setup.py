from setuptools import setup, find_packages

setup(
    name="convnova",
    version="1.0.0",
    description="Gated dilated convolutional models for DNA sequences",
    license="Apache-2.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    py_modules=["main", "quick_start"],
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "tqdm>=4.65",
    ],
    extras_require={
        "tests": [
            "pytest>=7.4",
            "scikit-learn>=1.3",
        ],
    },
    python_requires=">=3.8",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
    ],
    entry_points={
        'console_scripts': [
            'convnova=main:main',
            'convnova-demo=quick_start:main',
        ],
    },
)
