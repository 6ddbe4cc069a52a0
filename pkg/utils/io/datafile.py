"""Observed frequency-domain data as CSV, one row per (frequency, source, receiver)."""
import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from utils.errors import ConfigError

logger = logging.getLogger("datafile")

COLUMNS = ["frequency_hz", "source_index", "receiver_index", "real", "imag"]


@dataclass(frozen=True)
class DataFile:
    frequencies: Tuple[float, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        values = np.asarray(self.values, dtype=complex)
        if values.ndim != 3 or values.shape[0] != len(self.frequencies):
            raise ConfigError(f"data of shape {values.shape} does not match {len(self.frequencies)} frequencies")
        if not np.all(np.isfinite(values)):
            raise ConfigError("data contains non-finite values")
        object.__setattr__(self, "values", values)

    def by_frequency(self) -> Dict[float, np.ndarray]:
        return {f: self.values[i] for i, f in enumerate(self.frequencies)}

    def to_frame(self) -> pd.DataFrame:
        nf, ns, nr = self.values.shape
        f_idx, s_idx, r_idx = np.meshgrid(np.arange(nf), np.arange(ns), np.arange(nr), indexing="ij")
        flat = self.values.ravel()
        return pd.DataFrame({
            "frequency_hz": np.asarray(self.frequencies)[f_idx.ravel()],
            "source_index": s_idx.ravel(),
            "receiver_index": r_idx.ravel(),
            "real": flat.real,
            "imag": flat.imag,
        }, columns=COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "DataFile":
        missing = [c for c in COLUMNS if c not in frame.columns]
        if missing:
            raise ConfigError(f"data file lacks column(s): {', '.join(missing)}")
        # order of first appearance
        frequencies = [float(f) for f in frame["frequency_hz"].unique()]
        ns = int(frame["source_index"].max()) + 1
        nr = int(frame["receiver_index"].max()) + 1
        expected = len(frequencies) * ns * nr
        if len(frame) != expected or frame.duplicated(["frequency_hz", "source_index", "receiver_index"]).any():
            raise ConfigError(f"data file needs exactly one row per (frequency, source, receiver): "
                              f"{len(frame)} rows for {expected} combinations")
        values = np.zeros((len(frequencies), ns, nr), dtype=complex)
        f_pos = {f: i for i, f in enumerate(frequencies)}
        rows = frame["frequency_hz"].map(f_pos).to_numpy()
        values[rows, frame["source_index"].to_numpy(), frame["receiver_index"].to_numpy()] = \
            frame["real"].to_numpy() + 1j * frame["imag"].to_numpy()
        return cls(tuple(frequencies), values)


def write_data(path: str, data: DataFile) -> None:
    data.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote {data.values.size} data rows to {path}")


def read_data(path: str) -> DataFile:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise ConfigError(f"cannot read data file {path}: {err}") from err
    return DataFile.from_frame(frame)
