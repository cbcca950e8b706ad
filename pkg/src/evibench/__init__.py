"""Workbench for Dirichlet-output uncertainty-aware classifiers.

Three training objectives (evidential log loss, forward-KL prior networks,
and contrastive density-ratio evidence) share one small trainable network
core and one analysis pipeline that quantifies how tightly the learned
Dirichlet strength is coupled to misclassification and class identity.
"""

from __future__ import annotations

__version__ = "0.1.0"
