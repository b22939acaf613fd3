"""Declarative privacy-preserving inference queries.

Annotate sensitive data once; the engine detects sensitive subqueries by
taint analysis over a relational IR, enumerates privacy-preserving rewrite
plans (DP model substitution, noisy-embedding inference, output
perturbation), selects plans under privacy budgets with a cost-based
optimizer, executes them, and refines its cost model from feedback.
"""

__version__ = "0.1.0"
