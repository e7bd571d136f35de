import json
import pathlib
from typing import Any

import numpy as np
import pandas as pd

from logger import set_up_logging

logger = set_up_logging(__name__)

DATA_DIR = pathlib.Path("data")
FLOAT_FORMAT = "%.17g"


def _encode(value: Any):
    """json.dump fallback for numpy values and paths."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, pathlib.PurePath):
        return str(value)
    raise TypeError(f"cannot write {type(value).__name__} to JSON")


def write_frame(frame: pd.DataFrame, path: pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def read_frame(path: pathlib.Path) -> pd.DataFrame:
    return pd.read_csv(path)


def write_json(payload: Any, path: pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fd:
        json.dump(payload, fd, indent=2, default=_encode)
    logger.debug(f"Wrote {path}")
    return path


def read_json(path: pathlib.Path) -> Any:
    with open(path, "r") as fd:
        return json.load(fd)


def write_text(text: str, path: pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fd:
        fd.write(text)
    return path
