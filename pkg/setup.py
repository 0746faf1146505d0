# setup.py
from setuptools import setup, find_packages

setup(
    name='wildeuler-cli',
    version='0.1.0',
    packages=find_packages(exclude=['examples', 'examples.*']),
    python_requires='>=3.9',
    install_requires=[
        'numpy>=1.22.0',
        'scipy>=1.9.0',
        'click>=8.0.0',
        'prompt_toolkit>=3.0.0',
        'chardet>=5.0.0',
    ],
    extras_require={
        'test': [
            'pytest>=7.0.0',
            'sympy>=1.10',
        ],
    },
    entry_points={
        'console_scripts': [
            'wildeuler = wildeuler.main:cli',
        ],
    },
)
