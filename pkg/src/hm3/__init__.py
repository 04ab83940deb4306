"""Hierarchical multi-objective model merging on a synthetic model zoo.

Two levels: preference-weighted parameter-space merges (drop/rescale plus
sign-consistent combination) indexed by a simplex lattice of weight vectors,
then a learned search over layer-level inference paths for each preference.
Results are scored as a Pareto front under the hypervolume indicator.
"""

__version__ = "0.1.0"
