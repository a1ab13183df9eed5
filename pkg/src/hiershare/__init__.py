"""Desk-scale multi-task learning lab.

Builds tiny transformer encoders with a three-tier parameter-sharing
hierarchy (shared / cluster / task-specific layers), measures task
relevance three ways, groups tasks by k-means over relevance scores,
and trains everything with AdamW under a linearly decayed learning rate.
"""

__version__ = "0.1.0"
