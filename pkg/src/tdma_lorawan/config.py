"""Scenario configuration: flat ``section.key = value`` files with defaults."""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional

from .mac import CsmaConfig, MacPolicy
from .superframe import NonDyadicPeriod, validate_period
from .phy import DEFAULT_CAPTURE_DB, LinkModel, RadioConfig, time_on_air

DEFAULT_T0_MS = 4000.0
DEFAULT_SLOTS = {7: 60, 9: 20}


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based source line when known."""

    def __init__(self, message: str, source: str = "<config>", line: Optional[int] = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


class _FieldError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(message)


def _require(key: str, ok: bool, message: str) -> None:
    if not ok:
        raise _FieldError(key, message)


@dataclass(frozen=True)
class PhySection:
    sf: int = 9
    bw_hz: float = 125_000.0
    cr: int = 1
    payload_bytes: int = 10
    preamble: int = 8
    tx_dbm: float = 17.0
    crc: bool = True
    explicit_header: bool = True

    def __post_init__(self) -> None:
        _require("phy.sf", 7 <= self.sf <= 12, f"phy.sf must be in 7..12, got {self.sf}")
        _require("phy.bw_hz", self.bw_hz > 0, "phy.bw_hz must be positive")
        _require("phy.cr", 1 <= self.cr <= 4, f"phy.cr must be in 1..4, got {self.cr}")
        _require("phy.payload_bytes", 1 <= self.payload_bytes <= 255, "phy.payload_bytes must be in 1..255")
        _require("phy.preamble", self.preamble >= 0, "phy.preamble must be >= 0")


@dataclass(frozen=True)
class TrafficSection:
    interval_s: float = 4.0
    model: str = "periodic"

    def __post_init__(self) -> None:
        _require("traffic.interval_s", self.interval_s > 0, "traffic.interval_s must be positive")
        _require("traffic.model", self.model in ("periodic", "poisson"), "traffic.model must be periodic or poisson")


@dataclass(frozen=True)
class NetSection:
    channels: int = 8

    def __post_init__(self) -> None:
        _require("net.channels", self.channels >= 1, "net.channels must be >= 1")


@dataclass(frozen=True)
class TdmaSection:
    slots_per_frame: Optional[int] = None
    slot_ms: Optional[float] = None
    guard_ms: Optional[float] = None
    join: str = "contention"
    access_payload_bytes: int = 10
    access_backoff_max_exp: int = 5
    priority: int = 0

    def __post_init__(self) -> None:
        _require("tdma.slots_per_frame", self.slots_per_frame is None or self.slots_per_frame >= 1,
                 "tdma.slots_per_frame must be >= 1")
        _require("tdma.slot_ms", self.slot_ms is None or self.slot_ms > 0, "tdma.slot_ms must be positive")
        _require("tdma.guard_ms", self.guard_ms is None or self.guard_ms >= 0, "tdma.guard_ms must be >= 0")
        _require("tdma.join", self.join in ("contention", "provisioned"),
                 "tdma.join must be contention or provisioned")
        _require("tdma.access_payload_bytes", 1 <= self.access_payload_bytes <= 255,
                 "tdma.access_payload_bytes must be in 1..255")
        _require("tdma.access_backoff_max_exp", 0 <= self.access_backoff_max_exp <= 16,
                 "tdma.access_backoff_max_exp must be in 0..16")


@dataclass(frozen=True)
class SyncSection:
    interval_s: float = 600.0
    beacon_interval_s: float = 4.0
    beacon_toa_ms: float = 36.0
    sigma_ms: float = 2.0
    hw_sigma_ms: float = 3.0
    drift_ppm: float = 20.0
    beacon_loss: float = 0.0
    retry_ms: Optional[float] = None
    max_failures: int = 3

    def __post_init__(self) -> None:
        _require("sync.interval_s", self.interval_s > 0, "sync.interval_s must be positive")
        _require("sync.beacon_interval_s", self.beacon_interval_s > 0, "sync.beacon_interval_s must be positive")
        _require("sync.sigma_ms", self.sigma_ms >= 0, "sync.sigma_ms must be >= 0")
        _require("sync.hw_sigma_ms", self.hw_sigma_ms >= 0, "sync.hw_sigma_ms must be >= 0")
        _require("sync.drift_ppm", self.drift_ppm >= 0, "sync.drift_ppm must be >= 0 (it bounds |drift|)")
        _require("sync.beacon_loss", 0 <= self.beacon_loss <= 1, "sync.beacon_loss must be in [0, 1]")
        _require("sync.max_failures", self.max_failures >= 1, "sync.max_failures must be >= 1")


@dataclass(frozen=True)
class LinkSection:
    pl0_db: float = 40.0
    gamma: float = 4.0
    sigma_db: float = 6.0
    noise_dbm: float = -117.0
    sensitivity_dbm: float = -139.0
    capture: bool = True
    capture_first: bool = False
    shadowing: str = "per_packet"
    capture_db: dict = field(default_factory=lambda: dict(DEFAULT_CAPTURE_DB))

    def __post_init__(self) -> None:
        _require("link.gamma", self.gamma > 0, "link.gamma must be positive")
        _require("link.sigma_db", self.sigma_db >= 0, "link.sigma_db must be >= 0")
        _require("link.shadowing", self.shadowing in ("per_packet", "per_link"),
                 "link.shadowing must be per_packet or per_link")


@dataclass(frozen=True)
class CsmaSection:
    cca_dbm: float = -110.0
    backoff_slot_ms: float = 30.0
    window: int = 8
    max_stages: int = 8
    cad_ms: dict = field(default_factory=lambda: {7: 2.0, 9: 8.0})

    def __post_init__(self) -> None:
        _require("csma.window", self.window >= 1, "csma.window must be >= 1")
        _require("csma.max_stages", self.max_stages >= 1, "csma.max_stages must be >= 1")
        _require("csma.backoff_slot_ms", self.backoff_slot_ms >= 0, "csma.backoff_slot_ms must be >= 0")


@dataclass(frozen=True)
class EnergySection:
    tx_mw: float = 50.0
    rx_mw: float = 10.0
    sleep_mw: float = 0.005
    listen_ms: float = 200.0

    def __post_init__(self) -> None:
        for name in ("tx_mw", "rx_mw", "sleep_mw", "listen_ms"):
            _require(f"energy.{name}", getattr(self, name) >= 0, f"energy.{name} must be >= 0")


@dataclass(frozen=True)
class SuperframeSection:
    k_max: int = 0
    t0_ms: float = DEFAULT_T0_MS

    def __post_init__(self) -> None:
        _require("superframe.k_max", 0 <= self.k_max <= 16, "superframe.k_max must be in 0..16")
        _require("superframe.t0_ms", self.t0_ms > 0, "superframe.t0_ms must be positive")


@dataclass(frozen=True)
class SchedSection:
    rho_max: float = 0.3
    t_release_s: Optional[float] = None
    reuse: bool = True
    quota_mode: str = "degrade"
    strict_priority: bool = False

    def __post_init__(self) -> None:
        _require("sched.rho_max", 0 <= self.rho_max <= 1, "sched.rho_max must be in [0, 1]")
        _require("sched.t_release_s", self.t_release_s is None or self.t_release_s > 0,
                 "sched.t_release_s must be positive")
        _require("sched.quota_mode", self.quota_mode in ("degrade", "reject"),
                 "sched.quota_mode must be degrade or reject")


@dataclass(frozen=True)
class SimSection:
    duration_s: float = 4000.0
    seeds: tuple = tuple(range(1, 11))
    segments: int = 10
    trace: bool = False

    def __post_init__(self) -> None:
        _require("sim.duration_s", self.duration_s > 0, "sim.duration_s must be positive")
        _require("sim.seeds", len(self.seeds) >= 1, "sim.seeds must list at least one seed")
        _require("sim.segments", self.segments >= 1, "sim.segments must be >= 1")


SECTIONS = {
    "phy": PhySection,
    "traffic": TrafficSection,
    "net": NetSection,
    "tdma": TdmaSection,
    "sync": SyncSection,
    "link": LinkSection,
    "csma": CsmaSection,
    "energy": EnergySection,
    "superframe": SuperframeSection,
    "sched": SchedSection,
    "sim": SimSection,
}
TOP_LEVEL = ("protocol", "n_nodes", "area_m")


@dataclass(frozen=True)
class ScenarioConfig:
    protocol: str = "tdma"
    n_nodes: int = 20
    area_m: float = 100.0
    phy: PhySection = field(default_factory=PhySection)
    traffic: TrafficSection = field(default_factory=TrafficSection)
    net: NetSection = field(default_factory=NetSection)
    tdma: TdmaSection = field(default_factory=TdmaSection)
    sync: SyncSection = field(default_factory=SyncSection)
    link: LinkSection = field(default_factory=LinkSection)
    csma: CsmaSection = field(default_factory=CsmaSection)
    energy: EnergySection = field(default_factory=EnergySection)
    superframe: SuperframeSection = field(default_factory=SuperframeSection)
    sched: SchedSection = field(default_factory=SchedSection)
    sim: SimSection = field(default_factory=SimSection)

    def __post_init__(self) -> None:
        _require("protocol", self.protocol in {p.value for p in MacPolicy},
                 f"protocol must be one of {sorted(p.value for p in MacPolicy)}")
        _require("n_nodes", self.n_nodes >= 0, "n_nodes must be >= 0")
        _require("area_m", self.area_m > 0, "area_m must be positive")
        if self.link.capture:
            _require("link.capture_db", self.phy.sf in self.link.capture_db,
                     f"link.capture_db.sf{self.phy.sf} is required when capture is enabled")
        if self.policy == MacPolicy.CSMA:
            _require("csma.cad_ms", self.phy.sf in self.csma.cad_ms,
                     f"csma.cad_ms.sf{self.phy.sf} is required for the csma protocol")
        if self.policy in (MacPolicy.TDMA, MacPolicy.SLOTTED_ALOHA):
            _require("tdma.slot_ms", self.slots_per_frame * self.slot_ms <= self.frame_ms + 1e-6,
                     f"{self.slots_per_frame} slots of {self.slot_ms:g} ms overflow the "
                     f"{self.frame_ms:g} ms frame")
        if self.policy == MacPolicy.TDMA:
            try:
                validate_period(self.traffic.interval_s * 1000.0, self.superframe.t0_ms, self.superframe.k_max)
            except NonDyadicPeriod as exc:
                raise _FieldError("traffic.interval_s", str(exc)) from None
            _require("tdma.guard_ms", self.guard_ms + self.toa_ms <= self.slot_ms * self.slots_needed + 1e-6,
                     f"airtime {self.toa_ms:.3f} ms plus guard {self.guard_ms:g} ms exceeds the slot")

    # derived quantities -------------------------------------------------
    @property
    def policy(self) -> MacPolicy:
        return MacPolicy(self.protocol)

    def radio(self) -> RadioConfig:
        p = self.phy
        return RadioConfig(sf=p.sf, bw_hz=p.bw_hz, cr=p.cr, preamble_symbols=p.preamble,
                           crc_enabled=p.crc, explicit_header=p.explicit_header)

    @property
    def toa_ms(self) -> float:
        return time_on_air(self.radio(), self.phy.payload_bytes)

    @property
    def frame_ms(self) -> float:
        return self.superframe.t0_ms

    @property
    def slots_per_frame(self) -> int:
        if self.tdma.slots_per_frame is not None:
            return self.tdma.slots_per_frame
        if self.phy.sf in DEFAULT_SLOTS:
            return DEFAULT_SLOTS[self.phy.sf]
        return max(1, int(self.frame_ms // (self.toa_ms + 55.0)))

    @property
    def slot_ms(self) -> float:
        if self.tdma.slot_ms is not None:
            return self.tdma.slot_ms
        if self.tdma.guard_ms is not None:
            return self.toa_ms + self.tdma.guard_ms
        return self.frame_ms / self.slots_per_frame

    @property
    def slots_needed(self) -> int:
        return 1

    @property
    def guard_ms(self) -> float:
        if self.tdma.guard_ms is not None:
            return self.tdma.guard_ms
        return max(0.0, self.slot_ms - self.toa_ms)

    @property
    def t_release_ms(self) -> float:
        if self.sched.t_release_s is not None:
            return self.sched.t_release_s * 1000.0
        return 3.0 * self.traffic.interval_s * 1000.0

    def link_model(self) -> LinkModel:
        l = self.link
        return LinkModel(pl0_db=l.pl0_db, gamma=l.gamma, shadow_sigma_db=l.sigma_db,
                         noise_floor_dbm=l.noise_dbm, sensitivity_dbm=l.sensitivity_dbm,
                         capture_threshold_db=dict(l.capture_db))

    def csma_config(self) -> CsmaConfig:
        c = self.csma
        return CsmaConfig(cca_threshold_dbm=c.cca_dbm, cad_ms=dict(c.cad_ms),
                          backoff_slot_ms=c.backoff_slot_ms, window=c.window, max_stages=c.max_stages)

    # overrides ----------------------------------------------------------
    def with_overrides(self, items: Iterable[tuple[str, Any]], source: str = "<overrides>") -> ScenarioConfig:
        return _apply(self, [(k, v, None) for k, v in items], source)

    def set(self, **kw: Any) -> ScenarioConfig:
        """``cfg.set(**{"phy.sf": 7})`` style override with typed values or strings."""
        return self.with_overrides(kw.items())


def _hints(cls: type) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_seeds(text: str) -> tuple:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(x) for x in text.replace(",", " ").split())


def _coerce(hint: Any, value: Any, key: str) -> Any:
    if not isinstance(value, str):
        wants_float = hint is float or (typing.get_origin(hint) is typing.Union and float in typing.get_args(hint))
        if wants_float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    text = value.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none", "auto"):
            return None
        hint = next(a for a in args if a is not type(None))
    if key == "sim.seeds":
        return _parse_seeds(text)
    if hint is bool:
        return _parse_bool(text)
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def _apply(cfg: ScenarioConfig, items: list[tuple[str, Any, Optional[int]]], source: str) -> ScenarioConfig:
    top: dict[str, Any] = {}
    sect: dict[str, dict[str, Any]] = {}
    lines: dict[str, Optional[int]] = {}
    for key, value, line in items:
        key = key.strip()
        lines[key] = line
        parts = key.split(".")
        try:
            if len(parts) == 1 and key in TOP_LEVEL:
                hint = _hints(ScenarioConfig)[key]
                top[key] = _coerce(hint, value, key)
            elif len(parts) >= 2 and parts[0] in SECTIONS:
                cls = SECTIONS[parts[0]]
                names = {f.name for f in fields(cls)}
                if parts[1] not in names:
                    raise ConfigError(f"unknown key {key!r}", source, line)
                hint = _hints(cls)[parts[1]]
                bucket = sect.setdefault(parts[0], {})
                if hint in (dict, "dict") or typing.get_origin(hint) is dict:
                    if len(parts) != 3 or not parts[2].lower().startswith("sf"):
                        raise ConfigError(f"{key!r}: expected {parts[0]}.{parts[1]}.sfN", source, line)
                    sf = int(parts[2][2:])
                    current = bucket.get(parts[1], dict(getattr(getattr(cfg, parts[0]), parts[1])))
                    current[sf] = float(value)
                    bucket[parts[1]] = current
                elif len(parts) != 2:
                    raise ConfigError(f"unknown key {key!r}", source, line)
                else:
                    bucket[parts[1]] = _coerce(hint, value, key)
            else:
                raise ConfigError(f"unknown key {key!r}", source, line)
        except ConfigError:
            raise
        except (ValueError, StopIteration) as exc:
            raise ConfigError(f"{key}: {exc}", source, line) from None
    try:
        new_sections = {name: replace(getattr(cfg, name), **vals) for name, vals in sect.items()}
        return replace(cfg, **top, **new_sections)
    except _FieldError as exc:
        raise ConfigError(str(exc), source, _line_for(exc.key, lines)) from None


def _line_for(key: str, lines: dict[str, Optional[int]]) -> Optional[int]:
    if key in lines:
        return lines[key]
    for k, ln in lines.items():
        if k.startswith(key + ".") or key.startswith(k):
            return ln
    return None


def parse_config(text: str, source: str = "<config>", base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    items = []
    seen: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", source, n)
        key, value = (x.strip() for x in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", source, n)
        seen[key] = n
        items.append((key, value, n))
    return _apply(base or ScenarioConfig(), items, source)


def load_config(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("file not found", str(p))
    return parse_config(p.read_text(), source=str(p))


def _fmt(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(cfg: ScenarioConfig) -> str:
    """Every effective key, one per line; parsing the result yields ``cfg`` again."""
    out = [f"{k} = {_fmt(getattr(cfg, k))}" for k in TOP_LEVEL]
    for name in SECTIONS:
        section = getattr(cfg, name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, dict):
                for sf in sorted(value):
                    out.append(f"{name}.{f.name}.sf{sf} = {_fmt(float(value[sf]))}")
            else:
                out.append(f"{name}.{f.name} = {_fmt(value)}")
    return "\n".join(out) + "\n"
