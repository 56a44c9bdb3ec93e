"""
modcal - modality calibration for cross-modal object detection.
"""

__version__ = "0.1.0"
