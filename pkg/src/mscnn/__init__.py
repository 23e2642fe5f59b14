"""Multi-scale conv/deconv in-loop filter with gated dual-branch fusion.

Subpackages cover the tensor primitives (ops), the ten-layer dual-branch
network (network), gated fusion (fusion), training (training), the YUV /
patch / codec-proxy data pipeline (data), quality and rate-distortion
metrics (metrics), checkpoint serialization (checkpoint) and the command
line front end (cli).
"""

__version__ = "0.1.0"

from .backend import backend_name, set_backend

__all__ = ["backend_name", "set_backend", "__version__"]
