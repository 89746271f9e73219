"""Gossip-based decentralized federated anomaly detection.

Nodes train autoencoder detectors on non-IID local data and exchange one-bit
sign-quantized gradients by Random Walk or Epidemic gossip; a centralized
FL round is included as the baseline.
"""
__version__ = "0.1.0"
