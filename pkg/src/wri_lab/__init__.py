"""Weighted risk invariance (WRI) laboratory.

Modules:

* ``diffcore``: reverse-mode autodiff on numpy arrays, Adam, finite differences
* ``datagen``: seedable synthetic environments
* ``models``: predictors and density models
* ``objectives``: risks and invariance penalties
* ``trainer``: alternating minimisation and baseline training loops
* ``analysis``: general position, weighting bounds, density quality, ROC
* ``experiments`` / ``cli``: named experiments and the ``wri-lab`` command
"""

__version__ = "0.1.0"
