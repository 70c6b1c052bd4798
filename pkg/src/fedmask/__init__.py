"""Privacy-preserving federated averaging for network-function fleets.

A coordinator drives federated-learning rounds over a fleet of network
functions.  Local model updates are hidden behind pairwise-cancelling
additive masks derived from authenticated key exchanges, so the
coordinator only ever sees the masked sum.  A byte-exact cost meter
tracks every protocol message so the communication overhead of the
scheme can be compared against plain federated averaging.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "ModulusConfig": "fedmask.masking",
    "ModelVector": "fedmask.masking",
    "MaskedUpdate": "fedmask.masking",
    "OperatorPki": "fedmask.crypto",
    "Simulation": "fedmask.orchestrator",
    "RunConfig": "fedmask.config",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module 'fedmask' has no attribute {name!r}")
    return getattr(importlib.import_module(module), name)
