"""Toy-scale context denoising training: autodiff, model, task generator, attribution, CDT."""

__version__ = "0.1.0"
