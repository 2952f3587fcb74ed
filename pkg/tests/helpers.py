"""Shared builders for tests that need full-width highway models."""

import numpy as np

from umbrella.data import NormStats
from umbrella.dynamics import DynamicsConfig, DynamicsEnsemble
from umbrella.highway import OBS_DIM
from umbrella.planner import ModelSet
from umbrella.policy_value import (BCConfig, BCPolicyEnsemble, ValueConfig,
                                   ValueEnsemble)


def unit_norm(d_obs=OBS_DIM, d_act=2) -> NormStats:
    return NormStats(obs_mean=np.zeros(d_obs), obs_std=np.ones(d_obs),
                     act_mean=np.zeros(d_act), act_std=np.ones(d_act),
                     reward_mean=0.0, reward_std=1.0)


def tiny_highway_models(seed=0, K=2, n_c=2, hidden=(8,),
                        stochastic=True) -> ModelSet:
    """Randomly initialized full-observation models for loop tests."""
    norm = unit_norm()
    dyn = DynamicsEnsemble.create(
        DynamicsConfig(obs_dim=OBS_DIM, act_dim=2, history_len=n_c,
                       unroll_len=1, latent_dim=2, embed_dim=8,
                       hidden=hidden, ensemble_size=K), norm, seed)
    if stochastic:
        for k, head in enumerate(dyn.heads):
            head.set_stochastic(7000 + k)
    bc = BCPolicyEnsemble.create(
        BCConfig(obs_dim=OBS_DIM, act_dim=2, history_len=n_c,
                 hidden=hidden, ensemble_size=K), norm, seed + 1)
    value = ValueEnsemble.create(
        ValueConfig(obs_dim=OBS_DIM, act_dim=2, history_len=n_c,
                    hidden=hidden, ensemble_size=K), norm, seed + 2)
    return ModelSet(dyn, bc, value)


def zero_bc_heads(bc: BCPolicyEnsemble) -> BCPolicyEnsemble:
    """Force every head to output exactly zero."""
    for head in bc.heads:
        head.params.load_vector(np.zeros(head.params.n_params))
    return bc
