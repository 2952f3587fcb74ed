"""Uncertainty-aware offline model-based planning for highway driving.

Subpackages: nnkit (MLP core), highway (simulator), data (logged-data
tooling), dynamics (ensemble CVAE world model), policy_value (behavior
cloning and value heads), planner (sampled-rollout MPC), evalkit
(metrics, sweeps, benchmarks), cli (command line entry point).
"""

__version__ = "0.1.0"
