"""Exception hierarchy shared by every scaleood module."""
from __future__ import annotations

from typing import Any, Dict, List, Optional


class ScaleOodError(Exception):
    """Base class for all scaleood errors."""
    pass


class IngestError(ScaleOodError):
    """Malformed or inconsistent feature/head/label file."""
    pass


class ManifestError(IngestError):
    """Dataset manifest violates its contract."""
    pass


class ShapingError(ScaleOodError):
    """Invalid shaping input or configuration."""
    pass


class DegenerateSampleError(ShapingError):
    """Q_p = 0 (or exp(r) overflows) for one sample."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message if index is None else f"sample {index}: {message}")
        self.index = index


class MetricError(ScaleOodError):
    pass


class PrecisionError(ScaleOodError):
    """A closed form cannot be evaluated to working precision."""
    pass


class TrainingError(ScaleOodError):
    """Training diverged; `log` holds the epochs completed so far."""

    def __init__(self, message: str, log: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.log = log or []


class ConfigError(ScaleOodError):
    """Invalid configuration value or config file."""
    pass
