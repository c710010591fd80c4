"""OB-PUF workbench package

Simulation and analysis of obfuscated arbiter PUFs: the APUF delay model,
latent pattern-vector obfuscation with per-session reconfiguration, the
server-aided authentication protocol, analytic and Monte Carlo
authentication capability, and CMA-ES modeling attacks.  See the
``README.md`` in the project root for a quickstart.

Public classes are re-exported here for convenience.
"""

__version__ = "0.1.0"

from .apuf import ApufInstance, sample_apuf  # noqa: E402,F401
from .config_service import ConfigService, RunConfig  # noqa: E402,F401
from .obfuscation import ObPufDevice, PatternSet, PatternVector  # noqa: E402,F401
from .protocol import AuthParams, ServerModel, enroll, run_session  # noqa: E402,F401

__all__ = [
    "__version__",
    "ApufInstance",
    "AuthParams",
    "ConfigService",
    "ObPufDevice",
    "PatternSet",
    "PatternVector",
    "RunConfig",
    "ServerModel",
    "enroll",
    "run_session",
    "sample_apuf",
]
