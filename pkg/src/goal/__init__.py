"""Global-local alignment toolkit: a small dual encoder, pseudo local-pair
mining, token-similarity training, and retrieval evaluation.

Submodules are imported lazily by the CLI so thread limits can be applied
before numpy loads; library users import submodules directly.
"""

__version__ = "0.1.0"
