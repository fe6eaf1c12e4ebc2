"""Any-to-one voice conversion from self-supervised speech features with
adversarial removal of residual source-speaker information."""

__version__ = "0.1.0"
