"""morvit: a desk-scale vision transformer with per-token dynamic recursion.

Heavy submodules are imported explicitly (``morvit.model``, ``morvit.train``,
...) so that the CLI can configure thread limits before numpy loads.
"""

__version__ = "0.1.0"
