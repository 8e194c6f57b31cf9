"""Contact-safe model-based RL with Fastfood-feature GP dynamics.

Modules:

- ``fastfood``: Fastfood random cosine features.
- ``lgm``: Bayesian linear model on those features, evidence grid search.
- ``moment_matching``: analytic belief propagation through the model.
- ``safe_limits``: uncertainty-aware scaling/translating of the control box.
- ``pmpc``: receding-horizon planner over beliefs.
- ``sim_env``: planar two-link stirring surrogate.
- ``mbrl_loop``: the episodic learning loop with one-step-ahead planning.
- ``config`` / ``cli``: YAML configuration and the ``safembrl`` command.
"""

__version__ = "0.1.0"
