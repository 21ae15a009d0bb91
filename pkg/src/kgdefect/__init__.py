"""Knowledge-guided surface-defect classification on a small numpy autodiff engine.

Stage 1 trains a plain CNN classifier; its saliency maps, Otsu-binarised,
become priors and pseudo-labels for a stage-2 model with a segmentation branch.
"""

__version__ = "0.1.0"
