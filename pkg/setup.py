from setuptools import setup
from setuptools import find_packages


setup(
    name='posefield',
    version='0.1',
    description='Joint camera-pose refinement and multi-scale radiance fields on the CPU',
    license='BSD',
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.7',
        'pyyaml>=5.1',
        'tqdm>=4.50',
        'threadpoolctl>=2.0',
    ],
    extras_require={
        # render --format png fails without it; PPM and PFM output need nothing extra
        'png':  ['matplotlib>=3.3'],
        'test': ['pytest>=6.0'],
    },
    packages=find_packages(exclude=['tests']),
    package_data={'posefield.config': ['*.yml']},
    py_modules=['cli'],
    entry_points={'console_scripts': ['posefield=cli:main']},
)
