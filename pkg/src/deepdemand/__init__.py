"""Permutation-invariant (deep-set) demand estimation.

Modules: ``nncore`` (MLP primitives), ``deepset`` (share model),
``simgen`` (synthetic markets), ``baselines`` (logit, random-coefficients
logit, stacked MLP, mean), ``elastic`` (elasticities and benchmarks),
``causal`` (control function and debiased inference), ``autos`` and ``cli``.
"""

__version__ = "0.1.0"
