"""Trust-gated cloud data storage with a trusted third party.

Customers talk only to a gateway that scores every request and refuses
customers whose trust has fallen too low.  Admitted requests go to a trusted
third party that fragments, encrypts and MACs files before handing the
ciphertext to a storage provider, and that audits the provider later with
one-time MAC keys.
"""
from .errors import CDSError
from .sim import SimHarness, run_scenario
from .trust import ActionClass, Category, TrustConfig, TrustState, action_value, classify, record_action

__version__ = "0.1.0"

__all__ = [
    "ActionClass",
    "CDSError",
    "Category",
    "SimHarness",
    "TrustConfig",
    "TrustState",
    "action_value",
    "classify",
    "record_action",
    "run_scenario",
]
