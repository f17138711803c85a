"""Metastability toolkit for block-structured mean-field jump processes."""
from .model import (BlockModel, CallableRates, ColorGraph, ModelError, RateFamily, RateTerm,
                    load_model, model_from_dict, product_metric, validate_model)

__version__ = "0.1.0"
SCHEMA_VERSION = 1
