"""Edge, pathway, and union hypothesis tests for nonlinear DAGs (the SUGAR test)."""

__version__ = "0.1.0"
