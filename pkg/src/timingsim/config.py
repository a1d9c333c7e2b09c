"""
Scenario configuration (YAML).

Every section maps onto a dataclass; unknown keys are rejected so a typo in
a timing parameter fails loudly instead of silently falling back to a
default. See README.md for the full schema.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .codes import EventCode
from .grid import GridConfigError, GridParams, Transient
from .mtg import MtgConfigError, MtgParams
from .rtdl import DEFAULT_BITRATE, DEFAULT_LIST, DEFAULT_REGISTRY, frame_duration_ps
from .simcore import PS_PER_US

LINK_MODES = ("bitstream", "direct")
ALL_CHECKS = (
    "deviation_window",
    "sigma_target",
    "chopper_required",
    "extraction_alignment",
    "rtdl_ordering",
    "memory_coherence",
    "timestamp_unique",
    "link_integrity",
    "sync_lost_consistency",
)


class ConfigError(ValueError):
    def __init__(self, section: str, message: str):
        super().__init__(f"[{section}] {message}")
        self.section = section


@dataclass
class RingSection:
    circumference_m: float = 248.0
    kinetic_energy_mev: float = 1000.0
    # per-cycle tuning offset drawn uniformly from [-v, +v] ps
    period_variation_ps: int = 0


@dataclass
class RtdlSection:
    bitrate: int = DEFAULT_BITRATE
    lead_ps: int = 100 * PS_PER_US
    encoder_list: list = field(default_factory=lambda: list(DEFAULT_LIST))
    static_values: dict = field(default_factory=dict)
    tod_epoch_s: int = 1_700_000_000
    reset_schedule: list = field(default_factory=list)  # [{cycle: n, address: a}]


@dataclass
class UtilityModuleSpec:
    name: str
    reset_address: int = 0
    interrupts: list = field(default_factory=list)  # code names or numbers

    def __post_init__(self):
        self.interrupts = [_event_code(x, f"clients.utility_modules[{self.name}]") for x in self.interrupts]


@dataclass
class ChopperSpec:
    name: str
    kind: str = "t0"
    harmonic: Optional[int] = None
    alpha_max: Optional[float] = None
    kp: Optional[float] = None
    ki: Optional[float] = None
    kd: Optional[float] = None


@dataclass
class ClientsSection:
    utility_modules: list = field(default_factory=lambda: [UtilityModuleSpec("ioc0", 0x000101, ["CYCLE_START", "SYNC_LOST"])])
    choppers: list = field(
        default_factory=lambda: [
            ChopperSpec("t0", "t0"),
            ChopperSpec("bandwidth", "bandwidth"),
            ChopperSpec("fermi", "fermi"),
        ]
    )
    # None: the sync-lost threshold; the two must agree cycle by cycle
    klystron_window_ps: Optional[int] = None
    gap_ns: float = 300.0
    chopper_substeps: int = 16
    lock_cycles: int = 10


@dataclass
class Scenario:
    name: str = "scenario"
    cycles: int = 100
    seed: int = 1
    link_mode: str = "bitstream"
    checks: list = field(default_factory=lambda: list(ALL_CHECKS))
    grid: GridParams = field(default_factory=GridParams)
    ring: RingSection = field(default_factory=RingSection)
    mtg: MtgParams = field(default_factory=MtgParams)
    rtdl: RtdlSection = field(default_factory=RtdlSection)
    clients: ClientsSection = field(default_factory=ClientsSection)
    grid_seed_explicit: bool = False

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def with_section(self, section: str, **changes) -> "Scenario":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def _build(cls, data: Optional[dict], section: str, **extra):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(section, f"unknown key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(names))}")
    data.update(extra)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


def _event_code(name: Union[str, int], section: str) -> int:
    if isinstance(name, int):
        return name
    try:
        return int(EventCode[name.upper()])
    except KeyError:
        raise ConfigError(section, f"unknown event code name {name!r}") from None


def scenario_from_dict(raw: dict) -> Scenario:
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(Scenario)} - {"grid_seed_explicit"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError("scenario", f"unknown key(s): {', '.join(unknown)}")

    g = dict(raw.get("grid") or {})
    trs = []
    for i, tr in enumerate(g.pop("transients", []) or []):
        tr = dict(tr)
        extra = sorted(set(tr) - {"at_ps", "kind", "magnitude"})
        if extra:
            raise ConfigError(f"grid.transients[{i}]", f"unknown key(s): {', '.join(extra)}")
        try:
            trs.append(Transient(int(tr["at_ps"]), tr["kind"], float(tr["magnitude"])))
        except KeyError as exc:
            raise ConfigError(f"grid.transients[{i}]", f"missing {exc}") from None
        except GridConfigError as exc:
            raise ConfigError(f"grid.transients[{i}]", str(exc)) from None
    if "f_bounds" in g:
        g["f_bounds"] = tuple(g["f_bounds"])
    grid_seed_explicit = "seed" in g
    grid = _build(GridParams, g, "grid", transients=trs)

    mtg = _build(MtgParams, raw.get("mtg"), "mtg")
    ring = _build(RingSection, raw.get("ring"), "ring")
    rtdl = _build(RtdlSection, raw.get("rtdl"), "rtdl")
    rtdl.static_values = {int(k): int(v) for k, v in (rtdl.static_values or {}).items()}
    rtdl.encoder_list = [int(a) for a in rtdl.encoder_list]

    c = dict(raw.get("clients") or {})
    mods = c.pop("utility_modules", None)
    chops = c.pop("choppers", None)
    clients = _build(ClientsSection, c, "clients")
    if mods is not None:
        clients.utility_modules = [
            _build(UtilityModuleSpec, m, f"clients.utility_modules[{i}]") for i, m in enumerate(mods)
        ]
    if chops is not None:
        clients.choppers = [_build(ChopperSpec, ch, f"clients.choppers[{i}]") for i, ch in enumerate(chops)]

    rest = {k: raw[k] for k in ("name", "cycles", "seed", "link_mode", "checks") if k in raw}
    sc = Scenario(grid=grid, mtg=mtg, ring=ring, rtdl=rtdl, clients=clients, grid_seed_explicit=grid_seed_explicit, **rest)
    validate_static(sc)
    return sc


def validate_static(sc: Scenario) -> None:
    """Field-level checks that need no simulation."""
    if sc.cycles <= 0:
        raise ConfigError("scenario", "cycles must be positive")
    if sc.link_mode not in LINK_MODES:
        raise ConfigError("scenario", f"link_mode must be one of {LINK_MODES}")
    bad = sorted(set(sc.checks) - set(ALL_CHECKS))
    if bad:
        raise ConfigError("scenario", f"unknown check(s): {', '.join(bad)}")
    try:
        sc.grid.validate()
    except GridConfigError as exc:
        raise ConfigError("grid", str(exc)) from None
    try:
        sc.mtg.validate()
    except MtgConfigError as exc:
        raise ConfigError("mtg", str(exc)) from None
    if sc.mtg.coupling is None and sc.mtg.target_sigma_ps is None:
        raise ConfigError("mtg", "set either coupling or target_sigma_ps")
    if sc.ring.period_variation_ps < 0:
        raise ConfigError("ring", "period_variation_ps must be >= 0")
    r = sc.rtdl
    if r.bitrate <= 0:
        raise ConfigError("rtdl", "bitrate must be positive")
    for a in r.encoder_list:
        if a not in DEFAULT_REGISTRY:
            raise ConfigError("rtdl", f"encoder list address 0x{a:02X} is not registered")
    if len(set(r.encoder_list)) != len(r.encoder_list):
        raise ConfigError("rtdl", "encoder list contains duplicates")
    need = frame_duration_ps(r.bitrate) * len(r.encoder_list)
    if r.lead_ps <= need:
        raise ConfigError("rtdl", f"lead_ps={r.lead_ps} too short: {len(r.encoder_list)} frames need > {need} ps")
    for entry in r.reset_schedule:
        if set(entry) != {"cycle", "address"}:
            raise ConfigError("rtdl", "reset_schedule entries need exactly 'cycle' and 'address'")
    kw = sc.clients.klystron_window_ps
    if kw is not None and kw != sc.mtg.threshold_ps:
        raise ConfigError(
            "clients", f"klystron_window_ps={kw} differs from mtg.threshold_ps={sc.mtg.threshold_ps}"
        )
    names = [m.name for m in sc.clients.utility_modules] + [c.name for c in sc.clients.choppers]
    if len(set(names)) != len(names):
        raise ConfigError("clients", "client names must be unique")


def load_scenario(path: Union[str, Path]) -> Scenario:
    p = Path(path)
    with p.open() as fh:
        raw = yaml.safe_load(fh)
    sc = scenario_from_dict(raw)
    if "name" not in (raw or {}):
        sc.name = p.stem
    return sc


def builtin_names() -> list[str]:
    pkg = resources.files("timingsim") / "scenarios"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".yaml"))


def load_builtin(name: str) -> Scenario:
    pkg = resources.files("timingsim") / "scenarios" / f"{name}.yaml"
    if not pkg.is_file():
        raise ConfigError("scenario", f"no built-in scenario {name!r}; have {', '.join(builtin_names())}")
    raw = yaml.safe_load(pkg.read_text())
    return scenario_from_dict(raw)


def resolve(ref: str) -> Scenario:
    """A file path, or ``builtin:NAME``."""
    if ref.startswith("builtin:"):
        return load_builtin(ref.split(":", 1)[1])
    return load_scenario(ref)


def to_dict(sc: Scenario) -> dict[str, Any]:
    d = dataclasses.asdict(sc)
    d.pop("grid_seed_explicit")
    d["grid"]["f_bounds"] = list(d["grid"]["f_bounds"])
    d["grid"]["transients"] = [{"at_ps": t.at, "kind": t.kind, "magnitude": t.magnitude} for t in sc.grid.transients]
    return d
