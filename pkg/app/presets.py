"""Acquisition setups of the 1D benchmark protocol (one surface source, VSP receivers)."""
import logging
from typing import Dict

from pydantic import BaseModel, ConfigDict, Field

from utils.errors import ConfigError

logger = logging.getLogger("presets")


class Preset(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    length_km: float = Field(gt=0)
    frequency_hz: float = Field(gt=0)
    grid_m: float = Field(gt=0)
    receiver_interval_m: float = Field(gt=0)

    @property
    def nx(self) -> int:
        return int(round(self.length_km * 1000.0 / self.grid_m)) + 1

    @property
    def receiver_step(self) -> int:
        return max(1, int(round(self.receiver_interval_m / self.grid_m)))


PRESETS: Dict[str, Preset] = {
    "bp2004": Preset(name="2004 BP salt", length_km=11.46, frequency_hz=5.0, grid_m=6.0,
                     receiver_interval_m=180.0),
    "marmousi2": Preset(name="Marmousi II", length_km=3.75, frequency_hz=12.0, grid_m=5.0,
                        receiver_interval_m=85.0),
    "overthrust": Preset(name="Overthrust", length_km=4.6, frequency_hz=12.0, grid_m=20.0,
                         receiver_interval_m=120.0),
    "seg_salt": Preset(name="SEG/EAGE salt", length_km=4.2, frequency_hz=10.0, grid_m=20.0,
                       receiver_interval_m=120.0),
    "valhall": Preset(name="Synthetic Valhall", length_km=5.22, frequency_hz=5.0, grid_m=25.0,
                      receiver_interval_m=175.0),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(sorted(PRESETS))})") from None
