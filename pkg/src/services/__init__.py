"""Services implementing budgets, networks, training, inference, evaluation and data I/O."""
