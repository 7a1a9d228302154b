"""Experiment configuration files (TOML).

Every key is optional; defaults mirror the reference experiment setup
(62.5 kg robot, 0.78 m CoM height, 1.6 s horizon at 0.1 s, 1.0 s single /
0.1 s double support, mu = 1, polygon scale 0.1, 0.35 m wall standoff).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .contact import ContactSettings
from .model import ContactPoint, WorldParams, rotation_from_normal
from .mpc import GaitSchedule, MpcConfig
from .sim import FallParams, ForceTracking, HandParams, Push, Scenario


class ConfigError(ValueError):
    pass


SCHEMA = {
    "world": {"mass", "gravity", "com_height"},
    "gait": {"ss_duration", "ds_duration", "initial_ds", "first_support", "walking"},
    "mpc": {"horizon", "dt", "polygon_scale", "foot_half_extents", "w_jerk", "w_vel", "w_zmp",
            "w_slack", "w_foot", "step_x", "step_y", "stance_width", "ref_velocity", "slack_eps"},
    "contact": {"kappa", "s_z_bounds", "f_z_bounds", "bilinear_sign"},
    "wall": {"x", "standoff", "mu", "f_n_max", "points_y", "points_z", "enabled"},
    "hand": {"speed", "reach_radius", "rest_offset", "attach_tol", "shoulder_offsets"},
    "tracking": {"tau", "noise"},
    "fall": {"margin", "window", "radius"},
    "sim": {"duration", "plant_dt", "release_hold", "seed"},
    "sweep": {"samples", "mu_range", "mu_steps", "dz_range", "dz_steps", "s_z", "acc_range",
              "contact_point", "f_n_max", "kappa", "chunk"},
    "bench": {"horizons", "contacts", "repetitions", "seed"},
    "maxpush": {"variants", "phases", "resolution", "max_impulse", "push_duration",
                "push_start", "settle", "direction"},
}
LIST_TABLES = {
    "pushes": ({"time", "impulse"}, {"duration"}),
    "contacts": ({"p", "normal"}, {"mu", "f_n_max", "tangent"}),
}


@dataclass
class SweepSettings:
    samples: int = 100_000
    mu_range: tuple = (0.1, 1.0)
    mu_steps: int = 16
    dz_range: tuple = (-0.05, 0.05)
    dz_steps: int = 5
    s_z: float = 0.02
    acc_range: float = 2.0
    contact_point: tuple = (0.45, 0.0, 0.9)
    f_n_max: float = 200.0
    kappa: float = 0.1
    chunk: int = 400


@dataclass
class BenchSettings:
    horizons: tuple = (4, 8, 16)
    contacts: tuple = (5, 10, 20, 40)
    repetitions: int = 20
    seed: int = 0


@dataclass
class MaxPushSettings:
    # wall plane x per variant: zero / one / two recovery steps before contact
    variants: dict = field(default_factory=lambda: {"zero": 0.35, "one": 0.65, "two": 0.95})
    phases: int = 5
    resolution: float = 0.25
    max_impulse: float = 60.0
    push_duration: float = 0.1
    push_start: float = 2.0
    settle: float = 3.0
    direction: tuple = (1.0, 0.0)


@dataclass
class ExperimentConfig:
    world: WorldParams = field(default_factory=WorldParams)
    gait: GaitSchedule = field(default_factory=GaitSchedule)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    contact_kwargs: dict = field(default_factory=dict)
    wall: dict = field(default_factory=lambda: dict(
        enabled=True, x=0.35, standoff=0.35, mu=1.0, f_n_max=200.0,
        points_y=(-0.4, -0.2, 0.0, 0.2), points_z=(0.9, 1.2)))
    extra_contacts: list = field(default_factory=list)
    pushes: list = field(default_factory=list)
    hand: HandParams = field(default_factory=lambda: HandParams(reach_radius=0.6))
    tracking: ForceTracking = field(default_factory=ForceTracking)
    fall: FallParams = field(default_factory=FallParams)
    duration: float = 5.0
    plant_dt: float = 0.001
    release_hold: float = 0.5
    seed: int = 0
    sweep: SweepSettings = field(default_factory=SweepSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    maxpush: MaxPushSettings = field(default_factory=MaxPushSettings)

    def contact_settings(self) -> ContactSettings:
        return ContactSettings(world=self.world, **self.contact_kwargs)

    def wall_contacts(self, wall_x: float | None = None) -> list:
        w = self.wall
        if not w["enabled"]:
            return []
        x = w["x"] if wall_x is None else wall_x
        R = rotation_from_normal([-1.0, 0.0, 0.0])
        out = []
        for z in w["points_z"]:
            for y in w["points_y"]:
                out.append(ContactPoint([x, y, z], R, w["mu"], w["f_n_max"], len(out)))
        return out

    def scenario(self, *, wall_x: float | None = None, pushes=None, hands: bool = True,
                 duration: float | None = None, seed: int | None = None) -> Scenario:
        """Scenario with the wall at ``wall_x`` (default from the file)."""
        x = self.wall["x"] if wall_x is None else wall_x
        contacts = self.wall_contacts(x) if hands else []
        if hands:
            base = len(contacts)
            for i, c in enumerate(self.extra_contacts):
                contacts.append(ContactPoint(c.p, c.rotation, c.mu, c.f_n_max, base + i))
        exclusions = ()
        if self.wall["enabled"]:
            exclusions = ((1.0, 0.0, x - self.wall["standoff"]),)
        mpc = _replace(self.mpc, exclusions=exclusions)
        return Scenario(
            world=self.world, gait=self.gait, mpc=mpc, contact=self.contact_settings(),
            contacts=contacts, pushes=list(self.pushes if pushes is None else pushes),
            hand=self.hand, tracking=self.tracking, fall=self.fall,
            duration=self.duration if duration is None else duration, plant_dt=self.plant_dt,
            release_hold=self.release_hold, seed=self.seed if seed is None else seed,
        )


def _replace(obj, **kw):
    from dataclasses import replace
    return replace(obj, **kw)


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*(\[+\s*{re.escape(key)}\s*\]+|{re.escape(key)}\s*=)")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return i
    return None


def _where(text, key):
    ln = _line_of(text, key)
    return f"line {ln}: " if ln else ""


def _tuple(v, n=None, what="value"):
    if not isinstance(v, (list, tuple)) or (n is not None and len(v) != n):
        raise ConfigError(f"{what} must be a list of {n} numbers")
    return tuple(float(x) for x in v)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for key in data:
        if key not in SCHEMA and key not in LIST_TABLES:
            raise ConfigError(f"{source}: {_where(text, key)}unknown section [{key}]")
        if key in SCHEMA:
            if not isinstance(data[key], dict):
                raise ConfigError(f"{source}: {_where(text, key)}[{key}] must be a table")
            for k in data[key]:
                if k not in SCHEMA[key]:
                    raise ConfigError(f"{source}: {_where(text, k)}unknown key '{k}' in [{key}]")
    for name, (required, optional) in LIST_TABLES.items():
        entries = data.get(name, [])
        if not isinstance(entries, list):
            raise ConfigError(f"{source}: {_where(text, name)}'{name}' must be an array of tables [[{name}]]")
        for i, e in enumerate(entries):
            missing = sorted(required - set(e))
            if missing:
                raise ConfigError(f"{source}: {_where(text, name)}[[{name}]] entry {i}: missing key '{missing[0]}'")
            extra = sorted(set(e) - required - optional)
            if extra:
                raise ConfigError(f"{source}: {_where(text, extra[0])}[[{name}]] entry {i}: unknown key '{extra[0]}'")
    try:
        return _build(data)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid value: {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def _build(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    w = data.get("world", {})
    cfg.world = WorldParams(m=w.get("mass", 62.5), g=w.get("gravity", 9.81), c_z=w.get("com_height", 0.78),
                            dt=data.get("mpc", {}).get("dt", 0.1))
    cfg.gait = GaitSchedule(**data.get("gait", {}))

    m = dict(data.get("mpc", {}))
    dt = m.pop("dt", 0.1)
    horizon = m.pop("horizon", 1.6)
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9:
        raise ConfigError("mpc.horizon must be a multiple of mpc.dt")
    for key in ("foot_half_extents", "step_x", "step_y", "ref_velocity"):
        if key in m:
            m[key] = _tuple(m[key], 2, f"mpc.{key}")
    cfg.mpc = MpcConfig(horizon_steps=steps, dt_mpc=dt, **m)

    c = dict(data.get("contact", {}))
    for key in ("s_z_bounds", "f_z_bounds"):
        if key in c:
            c[key] = _tuple(c[key], 2, f"contact.{key}")
    cfg.contact_kwargs = c
    cfg.contact_settings()  # validate early

    wall = dict(cfg.wall)
    wall.update(data.get("wall", {}))
    wall["points_y"] = _tuple(wall["points_y"], None, "wall.points_y")
    wall["points_z"] = _tuple(wall["points_z"], None, "wall.points_z")
    cfg.wall = wall

    for i, e in enumerate(data.get("contacts", [])):
        R = rotation_from_normal(_tuple(e["normal"], 3, "contacts.normal"), e.get("tangent"))
        cfg.extra_contacts.append(ContactPoint(_tuple(e["p"], 3, "contacts.p"), R, e.get("mu", 1.0),
                                               e.get("f_n_max", 200.0), i))
    cfg.pushes = [Push(float(e["time"]), _tuple(e["impulse"], 2, "pushes.impulse"), float(e.get("duration", 0.1)))
                  for e in data.get("pushes", [])]

    h = dict(data.get("hand", {}))
    for key, n in (("rest_offset", 3),):
        if key in h:
            h[key] = _tuple(h[key], n, f"hand.{key}")
    if "shoulder_offsets" in h:
        h["shoulder_offsets"] = tuple(_tuple(o, 3, "hand.shoulder_offsets") for o in h["shoulder_offsets"])
    h.setdefault("reach_radius", 0.6)
    cfg.hand = HandParams(**h)
    cfg.tracking = ForceTracking(**data.get("tracking", {}))
    cfg.fall = FallParams(**data.get("fall", {}))
    s = data.get("sim", {})
    cfg.duration = float(s.get("duration", cfg.duration))
    cfg.plant_dt = float(s.get("plant_dt", cfg.plant_dt))
    cfg.release_hold = float(s.get("release_hold", cfg.release_hold))
    cfg.seed = int(s.get("seed", cfg.seed))

    sw = dict(data.get("sweep", {}))
    for key, n in (("mu_range", 2), ("dz_range", 2), ("contact_point", 3)):
        if key in sw:
            sw[key] = _tuple(sw[key], n, f"sweep.{key}")
    cfg.sweep = SweepSettings(**sw)
    b = dict(data.get("bench", {}))
    for key in ("horizons", "contacts"):
        if key in b:
            b[key] = tuple(int(v) for v in b[key])
    cfg.bench = BenchSettings(**b)
    mp = dict(data.get("maxpush", {}))
    if "direction" in mp:
        mp["direction"] = _tuple(mp["direction"], 2, "maxpush.direction")
    if "variants" in mp:
        if not isinstance(mp["variants"], dict) or not mp["variants"]:
            raise ConfigError("maxpush.variants must be a non-empty table of name = wall_x")
        mp["variants"] = {str(k): float(v) for k, v in mp["variants"].items()}
    cfg.maxpush = MaxPushSettings(**mp)
    if cfg.sweep.samples < 1:
        raise ConfigError("sweep.samples must be >= 1")
    if not cfg.bench.horizons or not cfg.bench.contacts:
        raise ConfigError("bench grid must be non-empty")
    return cfg
