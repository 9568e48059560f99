"""Uncertainty-minimizing exploration agents.

Two settings share one recipe: a generative perception model trained with a
variational objective, and actions chosen to shrink the posterior's entropy.
The discrete setting explores controllable Markov chains; the continuous one
explores images through a band-limited foveal sensor.
"""

__version__ = "0.1.0"

from . import av_agent, av_env, cmc_agent, cmc_env, diffcore, numerics, runner

__all__ = [
    "numerics",
    "diffcore",
    "cmc_env",
    "cmc_agent",
    "av_env",
    "av_agent",
    "runner",
]
