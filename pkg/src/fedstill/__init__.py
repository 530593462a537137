"""fedstill: desk-scale federated continual segmentation.

Clients train small class-conditioned segmentation models locally and
upload them once; the server distills a fresh global model from the
stored collection on an unlabeled volume set, instead of paying
round-based parameter averaging costs at every stage.
"""

__version__ = "0.1.0"
