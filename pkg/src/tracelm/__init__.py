"""tracelm: tabular autoregressive language models for activity-trace entropy.

The package turns raw audit-event CSV streams into quantized sessions, trains
small decoder transformers with a field-masked objective, and scores per-row
cross-entropy as a workflow-complexity signal.
"""

__version__ = "0.1.0"
