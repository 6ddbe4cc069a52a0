"""Convergence log (CSV) and run header (YAML)."""
import logging
from typing import Any, Dict, Sequence

import pandas as pd
import yaml

from core.irwri import ConvergenceRecord

logger = logging.getLogger("run_log")

LOG_COLUMNS = ["iter", "batch", "data_res", "wave_res", "model_err", "reg_value", "stop"]


def records_frame(records: Sequence[ConvergenceRecord]) -> pd.DataFrame:
    rows = [{
        "iter": r.iteration,
        "batch": r.batch,
        "data_res": r.data_res,
        "wave_res": r.wave_res,
        "model_err": r.model_err,
        "reg_value": r.reg_value,
        "stop": r.stop,
    } for r in records]
    return pd.DataFrame(rows, columns=LOG_COLUMNS)


def write_convergence_log(path: str, records: Sequence[ConvergenceRecord]) -> None:
    records_frame(records).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote {len(records)} convergence records to {path}")


def read_convergence_log(path: str) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                        na_values={"model_err": [""]})
    return frame


def write_run_header(path: str, header: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(header, handle, sort_keys=False)
    logger.info(f"Wrote run header {path}")


def read_run_header(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        return yaml.safe_load(handle)
