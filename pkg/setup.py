import re
from setuptools import setup


# https://packaging.python.org/guides/single-sourcing-package-version/
def find_version(file_paths):
    with open(file_paths) as f:
        version_file = f.read()
    version_match = re.search(
        r"^__version__ = ['\"]([^'\"]*)['\"]", version_file, re.M
    )
    if version_match:
        return version_match.group(1)


CLASSIFIERS = """\
Development Status :: 3 - Alpha
Intended Audience :: Science/Research
License :: OSI Approved :: BSD License
Programming Language :: Python
Programming Language :: Python :: 3
Topic :: Scientific/Engineering :: Bio-Informatics
Topic :: Scientific/Engineering :: Image Recognition
Operating System :: POSIX
Operating System :: Unix

"""


setup(
    name='cellmatch',
    description='Unsupervised matching of cell nuclei across stereotyped '
                'animals and statistical atlas building',
    long_description=open('README.rst').read(),
    version=find_version("cellmatch/__init__.py"),
    packages=['cellmatch'],
    entry_points={
        'console_scripts': ['cellmatch = cellmatch.cli:main'],
    },
    install_requires=['numpy>=1.22', 'scipy>=1.9', 'joblib', 'psutil'],
    extras_require={'plot': ['matplotlib']},
    python_requires='>=3.9',
    test_suite='test',
    classifiers=[_f for _f in CLASSIFIERS.split('\n') if _f],
    license='BSD'
)
