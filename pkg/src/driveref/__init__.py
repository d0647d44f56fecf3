"""Multimodal driver referencing: geometry, simulation, models and evaluation."""

from .errors import (DegenerateVector, DrivRefError, InsufficientFrames, InvalidConfig, InvalidInput,
                     InvalidScene, InvalidSubject, InvalidTarget, InvalidTransform, ParseError, ShapeError,
                     StoreError, UsageError)

__version__ = "0.1.0"
