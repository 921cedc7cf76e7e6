"""Transductive prediction for sparse linear models.

Given training data and one test point ``x``, estimate ``<x, beta0>`` with
an estimator tailored to ``x``: a one-step debiased correction of a pilot
fit (:mod:`~sptransduct.jm_debias`) or an orthogonal-moment estimator with
cross-fitting (:mod:`~sptransduct.om_debias`).  :mod:`~sptransduct.risk_lab`
measures x-risk by Monte Carlo and :mod:`~sptransduct.experiments` drives
config-file experiments.
"""

__version__ = "0.1.0"
