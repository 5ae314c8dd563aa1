"""Online-convex-optimization MPC for on-board payload routing.

Modules: ``model`` (problem data and stacked LP), ``traffic`` (MMPP
arrivals), ``barrier`` (log-barrier Newton solvers), ``controllers``,
``plant`` (fluid queue dynamics) and ``experiments`` (campaigns and CLI).
"""

__version__ = "0.1.0"
