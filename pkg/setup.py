from setuptools import setup

with open('README.md', encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='sargtr',
    version='0.1.0',
    description='Graph transformer recognition of SAR targets from attributed scattering centers',
    long_description=long_description,
    long_description_content_type='text/markdown',
    packages=['sargtr'],
    install_requires=[
        'numpy>=1.20',
        'pandas',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['sargtr=sargtr.cli:main'],
    },
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: Apache Software License',
        'Operating System :: OS Independent',
    ],
    python_requires='>=3.8',
    keywords='sar, atr, graph-transformer, scattering-centers',
)
