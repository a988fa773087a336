"""
Impatient Networks - early-exit classifiers under time budgets

A convolutional backbone with early-prediction heads, trained jointly with a
loss weighted by the distribution of inference-time budgets, and evaluated
in a-priori budget, anytime and cascaded modes.
"""

__version__ = "1.0.0"
__author__ = "Impatient Networks"
