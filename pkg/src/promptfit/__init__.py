"""Finetuning and evaluation of promptable segmentation models: the
interactive training objective, simulated 2D annotation, prompt-propagation
3D segmentation, and semantic-segmentation adaptation, at desk scale."""

__version__ = "0.1.0"
