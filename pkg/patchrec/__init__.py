"""
PatchRec lab - hierarchical history compression for LLM-style sequential
recommendation, trained and evaluated on a from-scratch float64 transformer.
"""

__version__ = "0.1.0"
