import hashlib
import json
import random
import subprocess  # nosec
from typing import Any, Union

import numpy as np
import torch


def check_output(cmd: Union[str, list], silent=True, throw=False) -> str:
    if isinstance(cmd, str):
        cmd = list(filter(None, cmd.split(" ")))
    try:
        out = subprocess.check_output(cmd).decode().strip()  # nosec
        if not silent and out:
            print(out)
        return out
    except Exception as error:
        if throw:
            raise error
        return ""


def stable_hash(payload: Any, length: int = 12) -> str:
    """Short sha256 digest of a JSON-serializable payload, independent of key order."""
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(encoded).hexdigest()[:length]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def format_float(value: float, digits: int = 6) -> str:
    """Fixed-precision text for CSV cells; NaN becomes an empty cell."""
    if value is None or value != value:
        return ""
    return f"{value:.{digits}f}"
