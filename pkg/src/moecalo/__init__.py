"""Mixture-of-generative-experts surrogate for zero-degree calorimeter responses."""

from moecalo.dataset import (
    CalorimeterSpec,
    ParticleConditions,
    PreprocessTables,
    SchemaError,
    SplitIndex,
    ValueTransform,
    build_preprocess_tables,
    load_dataset,
    save_dataset,
    split,
)
from moecalo.synthgen import SynthConfig, synthesize

__version__ = "0.1.0"

__all__ = [
    "CalorimeterSpec",
    "ParticleConditions",
    "PreprocessTables",
    "SchemaError",
    "SplitIndex",
    "SynthConfig",
    "ValueTransform",
    "build_preprocess_tables",
    "load_dataset",
    "save_dataset",
    "split",
    "synthesize",
]
