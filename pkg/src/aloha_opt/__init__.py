"""Energy / rate-utility optimization of multihop slotted-Aloha networks under delay constraints.

Modules
-------
topology      network description, generators, the canonical scenario
delay_model   success probabilities and M/G/1 link delays
numerics      log-barrier convex solver and grid oracle
mac_opt       MAC problem: centralized, minimum delay constraint, non-iterative
mac_dist      distributed MAC algorithm (dual decomposition)
xlayer_opt    joint rate/contention problem with end-to-end delay limits
xlayer_dist   distributed cross-layer gradient and Newton-like schemes
sim           slot-level simulator
harness       scenario files, sweeps, presets and validation
"""

from .delay_model import link_delay, success_probs
from .mac_opt import MacScenario, min_delay_constraint, solve_mac_centralized, solve_mac_suboptimal
from .topology import Topology, build, canonical, gen_linear, gen_star
from .xlayer_opt import XLayerScenario, solve_xlayer_centralized

__version__ = "0.1.0"

__all__ = [
    "MacScenario",
    "Topology",
    "XLayerScenario",
    "build",
    "canonical",
    "gen_linear",
    "gen_star",
    "link_delay",
    "min_delay_constraint",
    "solve_mac_centralized",
    "solve_mac_suboptimal",
    "solve_xlayer_centralized",
    "success_probs",
]
