"""Promptable segmentation toolkit for OCTA retinal imagery.

Ships a frozen ViT segmentation backbone with low-rank adapters, prompt
point generation from vessel labels, topology-aware losses, evaluation
metrics, a training/cross-validation driver, and an interactive HTTP
inference service.
"""

__version__ = "0.1.0"

TASKS = ("RV", "FAZ", "capillary", "artery", "vein")
