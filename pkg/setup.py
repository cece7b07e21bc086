from os.path import abspath, dirname, join
from setuptools import setup

here = abspath(dirname(__file__))

with open(join(here, 'README.md')) as f:
    readme = f.read()

setup(name='sparse_finetuning_kit',
      version='0.1',
      description='Sparse fine-tuning with distillation and bitmask sparse inference on CPU',
      long_description=readme,
      long_description_content_type='text/markdown',
      packages=['sparsekit'],
      python_requires='>=3.8',
      install_requires=[
          "llvmlite>=0.39",
          "numba>=0.56",
          "numpy>=1.17.0",
          "pandas>=1.0",
          "scipy>=1.3.0",
          "tabulate>=0.8.7",
      ],
      extras_require={
          'dev': [
              "flake8>=3.7.8",
              "pytest>=6.0",
          ],
      },
      entry_points={
          'console_scripts': ['sparsekit=sparsekit.cli:main'],
      },
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Science/Research',
          'Topic :: Scientific/Engineering',
          'Programming Language :: Python :: 3'
      ])
