"""Multi-modal face anti-spoofing: dynamic images, SD-Net and PSMM-Net on a NumPy autodiff core."""

__version__ = "0.1.0"
