"""Weakly supervised MIL pretraining toolkit (label propagation, strong augmentation, robust losses)."""

__version__ = "0.1.0"
