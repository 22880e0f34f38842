"""Learning full-body throwing on a reduced legged thrower.

Submodules:

- ``ballistics``: projectile flight and the trajectory-to-target displacement error
- ``task``: target sampling and reward terms
- ``plant``: reduced multi-joint thrower dynamics
- ``env``: vectorised throwing environment
- ``curriculum``: adaptive difficulty schedule
- ``learner``: PPO actor-critic
- ``tuner``: asynchronous TPE search
- ``cli``: command line front end
"""
from ballista.errors import BallistaError, InvalidArgumentError, NumericalFault
from ballista.kernels import BACKEND_NAME

__version__ = "0.1.0"

__all__ = ["BallistaError", "InvalidArgumentError", "NumericalFault", "BACKEND_NAME",
           "__version__"]
