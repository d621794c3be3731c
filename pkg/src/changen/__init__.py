"""Synthetic bitemporal change data from single-temporal segmentation data."""
from .core import BitemporalSample, RunConfig, SingleTemporalDataset, ValidationError, load_dataset
from .eventsim import ChangeEvent, EventConfig, replay, simulate_event
from .gennet import Generator, GeneratorConfig, load_generator, synthesize
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BitemporalSample", "ChangeEvent", "EventConfig", "Generator", "GeneratorConfig", "RunConfig",
    "SingleTemporalDataset", "ValidationError", "load_dataset", "load_generator", "replay", "simulate_event",
    "synthesize",
]
