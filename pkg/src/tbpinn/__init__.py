"""Physics-informed neural networks for the planar equal-mass three-body problem.

Modules: ``dynamics`` (gravity law and invariants), ``integrator``
(Bulirsch-Stoer with a compiled kernel), ``datagen`` (initial-condition
sampling and dataset files), ``autodiff`` (scalar tape), ``network``,
``loss``, ``trainer``, ``evaluate`` and ``cli``.
"""

__version__ = "0.1.0"
