"""Drive-by bridge inspection toolkit.

Operational modal analysis by frequency domain decomposition, an
adversarial-autoencoder anomaly detector, matrix-profile change-point
detection and a vehicle-bridge simulator that supplies ground truth.
"""
__version__ = "0.1.0"
