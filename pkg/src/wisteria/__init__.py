"""Multi-view weak-supervision training with ontology smoothing.

The package couples a seeded synthetic patient generator with a family of
weak labeling operators, a shared-encoder multi-head model, a consistency
plus graph-smoothness training objective, metric implementations validated
against brute-force oracles, and the experiment protocols built on top.
A FastAPI service exposes the pipelines; the bundled CLI is a thin client.
"""

__version__ = "0.1.0"
