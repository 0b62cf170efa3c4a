"""Concurrent identification of qLPV models with robust control invariant sets.

Modules: qpcore (dense QP solver and its derivatives), ccpoly (polytope
templates), qlpv (model, observer, fit loss), rci (disturbance sets, RCI
feasibility QPs, bound propagation, iterative set refinement, verification), synthesis
(pretraining and concurrent training), control (tracking controller and
closed loop), plantlab (Duffing plant and datasets), experiment and cli.
Submodules are imported on demand; importing the package does not load jax.
"""

__version__ = "0.1.0"
