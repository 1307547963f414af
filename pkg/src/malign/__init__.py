"""Aligning a source model with witness models to make its adversarial examples transfer better.

Modules: ``tensor`` (autodiff engine), ``models`` / ``data`` (zoo and datasets),
``alignment``, ``attacks``, ``analysis``, ``harness`` / ``experiment`` (protocol and
manifest runner), ``io`` (binary containers) and ``cli``.
"""

from .alignment import AlignmentConfig, align
from .attacks import AttackConfig, attack
from .data import Dataset, synth_split
from .models import TrainConfig, build_model, train
from .tensor import Model

__version__ = "0.1.0"

__all__ = ["AlignmentConfig", "AttackConfig", "Dataset", "Model", "TrainConfig", "align", "attack", "build_model",
           "synth_split", "train"]
