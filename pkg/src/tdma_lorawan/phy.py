"""LoRa physical-layer arithmetic: airtime, link budget and capture."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

# Symbol time above which low-data-rate optimisation is switched on in auto mode.
LDRO_SYMBOL_MS = 16.0

DEFAULT_CAPTURE_DB = {7: 6.0, 9: 8.0}


@dataclass(frozen=True)
class RadioConfig:
    """LoRa modem settings that determine the time-on-air of a frame.

    ``ldro`` is ``"auto"`` (enabled when the symbol lasts more than 16 ms)
    or an explicit bool.
    """

    sf: int = 9
    bw_hz: float = 125_000.0
    cr: int = 1
    preamble_symbols: int = 8
    crc_enabled: bool = True
    explicit_header: bool = True
    ldro: bool | str = "auto"

    def __post_init__(self) -> None:
        if not 7 <= self.sf <= 12:
            raise ValueError(f"spreading factor must be in 7..12, got {self.sf}")
        if self.bw_hz <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bw_hz}")
        if not 1 <= self.cr <= 4:
            raise ValueError(f"coding-rate index must be in 1..4, got {self.cr}")
        if self.preamble_symbols < 0:
            raise ValueError("preamble length cannot be negative")
        if isinstance(self.ldro, str) and self.ldro != "auto":
            raise ValueError(f"ldro must be 'auto' or a bool, got {self.ldro!r}")

    @property
    def de(self) -> int:
        if self.ldro == "auto":
            return int(symbol_time(self) > LDRO_SYMBOL_MS)
        return int(bool(self.ldro))

    @property
    def header_bit(self) -> int:
        # H=0 means explicit header
        return 0 if self.explicit_header else 1


def symbol_time(cfg: RadioConfig) -> float:
    """Duration of one chirp symbol in milliseconds."""
    return (2**cfg.sf) / cfg.bw_hz * 1000.0


def payload_symbols(cfg: RadioConfig, payload_bytes: int) -> int:
    if not 1 <= payload_bytes <= 255:
        raise ValueError(f"payload must be 1..255 bytes, got {payload_bytes}")
    num = (
        8 * payload_bytes
        - 4 * cfg.sf
        + 28
        + 16 * int(cfg.crc_enabled)
        - 20 * cfg.header_bit
    )
    den = 4 * (cfg.sf - 2 * cfg.de)
    return 8 + max(math.ceil(num / den) * (cfg.cr + 4), 0)


def time_on_air(cfg: RadioConfig, payload_bytes: int) -> float:
    """Preamble plus payload duration in milliseconds."""
    t_sym = symbol_time(cfg)
    t_preamble = (cfg.preamble_symbols + 4.25) * t_sym
    return t_preamble + payload_symbols(cfg, payload_bytes) * t_sym


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def mw_to_dbm(mw: float) -> float:
    if mw <= 0.0:
        return -math.inf
    return 10.0 * math.log10(mw)


@dataclass(frozen=True)
class LinkModel:
    """Log-distance path loss with log-normal shadowing plus receiver limits."""

    pl0_db: float = 40.0
    gamma: float = 4.0
    shadow_sigma_db: float = 6.0
    noise_floor_dbm: float = -117.0
    sensitivity_dbm: float = -139.0
    capture_threshold_db: Mapping[int, float] = field(
        default_factory=lambda: dict(DEFAULT_CAPTURE_DB)
    )

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("path-loss exponent must be positive")
        if self.shadow_sigma_db < 0:
            raise ValueError("shadowing sigma cannot be negative")

    def capture_db(self, sf: int) -> float:
        try:
            return self.capture_threshold_db[sf]
        except KeyError:
            raise KeyError(f"no capture threshold configured for SF{sf}") from None


def path_loss_db(link: LinkModel, distance_m: float, shadow_sample_db: float = 0.0) -> float:
    d = max(distance_m, 1.0)
    return link.pl0_db + 10.0 * link.gamma * math.log10(d) + shadow_sample_db


def rx_power_dbm(
    tx_power_dbm: float, link: LinkModel, distance_m: float, shadow_sample_db: float = 0.0
) -> float:
    return tx_power_dbm - path_loss_db(link, distance_m, shadow_sample_db)


@dataclass
class Transmission:
    node_id: int
    channel_index: int
    sf: int
    start_time_ms: float
    toa_ms: float
    tx_power_dbm: float = 17.0
    distance_m: float = 1.0
    sampled_rx_power_dbm: float = 0.0

    def __post_init__(self) -> None:
        if self.toa_ms <= 0:
            raise ValueError("time-on-air must be positive")
        if self.start_time_ms < 0:
            raise ValueError("start time cannot be negative")

    @property
    def end_time_ms(self) -> float:
        return self.start_time_ms + self.toa_ms

    def overlaps(self, other: Transmission) -> bool:
        return (
            self.start_time_ms < other.end_time_ms
            and other.start_time_ms < self.end_time_ms
        )


class Outcome(str, Enum):
    DELIVERED = "delivered"
    LOST_COLLISION = "lost_collision"
    LOST_BELOW_SENSITIVITY = "lost_below_sensitivity"


def captures(power_dbm: float, interferer_dbm: Sequence[float], threshold_db: float) -> bool:
    """True when ``power_dbm`` beats the linear sum of interferers by the margin."""
    if not interferer_dbm:
        return True
    total = sum(dbm_to_mw(p) for p in interferer_dbm)
    return power_dbm - mw_to_dbm(total) >= threshold_db


def resolve_reception(
    concurrent: Sequence[Transmission],
    link: LinkModel,
    capture: bool = True,
    capture_requires_first: bool = False,
) -> list[Outcome]:
    """Decide the fate of each transmission in ``concurrent``.

    Only transmissions sharing channel and SF and overlapping in time interfere.
    Interferer power is summed linearly, undetectable interferers included.
    """
    outcomes = []
    for tx in concurrent:
        if tx.sampled_rx_power_dbm < link.sensitivity_dbm:
            outcomes.append(Outcome.LOST_BELOW_SENSITIVITY)
            continue
        others = [
            o
            for o in concurrent
            if o is not tx
            and o.channel_index == tx.channel_index
            and o.sf == tx.sf
            and o.overlaps(tx)
        ]
        if not others:
            outcomes.append(Outcome.DELIVERED)
            continue
        ok = capture and captures(
            tx.sampled_rx_power_dbm,
            [o.sampled_rx_power_dbm for o in others],
            link.capture_db(tx.sf),
        )
        if ok and capture_requires_first:
            ok = all(tx.start_time_ms < o.start_time_ms for o in others)
        outcomes.append(Outcome.DELIVERED if ok else Outcome.LOST_COLLISION)
    return outcomes
