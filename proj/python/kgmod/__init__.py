"""Knowledge-graph embeddings as an input modality for a frozen toy LM.

The heavy lifting lives in the _kgmod extension; this package re-exports it.
"""

from ._kgmod import *  # noqa: F401,F403
from ._kgmod import __version__  # noqa: F401
