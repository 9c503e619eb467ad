"""Causal-intervention statistics and a do-calculus context-prediction head.

Two layers live here. The discrete layer turns object annotations into
conditional and backdoor-adjusted (interventional) context distributions and
checks them against an exactly enumerable structural causal model. The
learned layer is a numpy context-prediction head (confounder dictionary,
attention, NWGM-approximated intervention) with hand-written gradients, a
momentum-SGD trainer and a collider filter; its region embeddings are exported
for concatenation onto existing features.
"""

__version__ = "0.1.0"
