"""gridnav: goal-conditioned decoder-only transformer navigation at desk scale.

Submodules:
    autodiff    dense float64 tensors with reverse-mode automatic differentiation
    env         deterministic maze gridworld with raycast observations
    planner     action-optimal route search over the gridworld
    dataset     expert trajectory collection, categorization and serialization
    model       the goal-conditioned decoder-only transformer policy
    training    behavior-cloning trainer (AdamW, epoch-decayed LR)
    evaluation  offline window accuracy and online rollout metrics
    cli         operator-facing command line (generate / train / eval / report)
"""

__version__ = "0.1.0"
