"""Coarse-to-fine recursive speech separation for unknown speaker counts.

The compiled core lives in ``_corfsep``. Installed wheels place it inside
this package; during development it sits on ``sys.path`` next to the build
tree, so both import forms are tried.
"""

try:
    from ._corfsep import *  # noqa: F401,F403
    from ._corfsep import __version__  # noqa: F401
except ImportError:  # pragma: no cover - build-tree layout
    from _corfsep import *  # noqa: F401,F403
    from _corfsep import __version__  # noqa: F401
