import hashlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

# Fixed float format so reruns produce byte-identical CSVs
FLOAT_FORMAT = "%.17g"


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_csv(path: str | Path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path: str | Path, columns: Sequence[str] | None = None) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise ValueError(f"{path} lacks columns {missing}")
    return frame


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent per-task generators derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def two_sigma(values: Iterable[float]) -> tuple[float, float]:
    """Mean and 2x sample standard deviation across sets."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 2:
        raise ValueError("need at least two sets for a 2-sigma error")
    return float(arr.mean()), float(2.0 * arr.std(ddof=1))
