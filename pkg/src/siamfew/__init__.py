"""Few-shot image classification with an attention-based Siamese network.

The package is a complete CPU training stack built on numpy: a reverse-mode
autodiff tape, convolutional layers, four plug-in attention blocks, two tiny
backbones, a contrastive twin model with a logistic distance back-end, a
balanced pair sampler, and a kappa-scored experiment harness with a CLI.
"""

__version__ = "0.1.0"
