from pathlib import Path
from typing import Annotated

import numpy as np
from jaxtyping import Float
from pydantic import BeforeValidator, Field, PlainSerializer

from ihpmp.utils import from_root_path, to_root_path

# Relative paths in configs are resolved against the repository root
RootPath = Annotated[
    Path, BeforeValidator(to_root_path), PlainSerializer(lambda x: str(from_root_path(x)))
]

Tolerance = Annotated[float, Field(gt=0, le=1)]
SafetyFactor = Annotated[float, Field(ge=1)]

Vector = tuple[float, ...]
"""Serialisable state or covector."""

State = Float[np.ndarray, "... m"]
Covector = Float[np.ndarray, "... m"]
Control = Float[np.ndarray, "... k"]
