"""medrank: filtering and re-ranking of candidate answers to medical questions.

The package combines entailment-based retrieval of supporting QA pairs with
two rankers: a feature-engineered baseline (logistic filtering + pairwise
hinge ranking) and a jointly trained multi-task neural model, plus an IR
evaluation kit and a command-line pipeline.
"""

__version__ = "0.1.0"
