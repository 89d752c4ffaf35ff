from setuptools import setup
from setuptools import find_packages
import os

with open('requirements.txt') as f:
    install_requires = f.read().splitlines()

# If building on RTD, don't install anything
if os.environ.get('READTHEDOCS', None) == 'True':
    install_requires = []

kw = dict(
    name='dampshift',
    version='0.1',
    description=('Small-signal stability analysis and demand-response load '
                 'shifting for oscillation damping'),
    install_requires=install_requires,
    packages=find_packages(exclude=['tests', 'docs']),
    package_data={'dampshift': ['data/*.case']},
    entry_points={'console_scripts': [
        'dampshift = dampshift.studies:cli_main']},
    url='')

setup(**kw)
