"""Three-stage graph ANN search: pilot traversal on a reduced subgraph,
residual refinement, and final traversal over the full graph."""

__version__ = "0.1.0"
