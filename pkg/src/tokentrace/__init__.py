"""Knowledge tracing with a small causal language model and a DKT baseline."""

__version__ = "0.1.0"
