"""Simulation and analysis of spatial Fleming-Viot and Cannings population models.

Modules: ``geometry`` (hierarchical group and torus), ``dynamics`` (interacting
diffusions, seedbank, McKean-Vlasov), ``cannings`` (particle system with
ancestry), ``genealogy`` (sampled genealogies and statistics), ``renorm``
(renormalization, dichotomy, interaction chain, seedbank tails), ``fss``
(finite system scheme), ``config`` and ``cli``.
"""
__version__ = "0.1.0"
