from typing import Any, Optional

import numpy as np

# Stream tags keep weight refresh, activation rounding, shuffling and
# evaluation draws independent even when they share a seed.
STREAM_WEIGHT = 1
STREAM_BIAS = 2
STREAM_ACT = 3
STREAM_SHUFFLE = 4
STREAM_EVAL = 5
STREAM_INIT = 6
STREAM_SAMPLE = 7


def derive_rng(seed: Optional[int], *path: int) -> Optional[np.random.Generator]:
    """Counter-based generator keyed by (seed, *path); None when no seed is given."""
    if seed is None:
        return None
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(sequence))


def convert_to_native(obj: Any) -> Any:
    """Convert numpy types to Python native types"""
    if isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, dict):
        return {key: convert_to_native(value) for key, value in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_to_native(item) for item in obj]
    else:
        return obj
