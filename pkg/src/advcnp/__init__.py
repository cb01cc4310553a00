"""Conditional neural processes with adversarial NCE calibration, on numpy.

Submodules:

- ``diffcore``: reverse-mode autodiff, layers, Adam, gradient checks.
- ``datasets``: synthetic sine / oscillator / GP-RBF function families.
- ``models``: CNP, attentive ACNP and contrastive CCNP.
- ``ebm``: energy model and the NCE objective.
- ``training``: stage-1 likelihood and stage-2 adversarial training.
- ``downstream``: heads on frozen context representations.
- ``experiments``: seeded experiment runs that write CSV and JSON artifacts.
"""
__version__ = "0.1.0"
