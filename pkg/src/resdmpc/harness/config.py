"""Experiment configuration and its JSON form."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..microgrid import BENCHMARK_GRIDS, DEFAULT_PRICES, GridSpec, MicrogridParams, PriceSchedule

ATTACK_KINDS = ("none", "constant", "constant_plus_gaussian")
TOP_KEYS = {"duration_h", "dt_h", "horizon_h", "robust_horizon", "controller", "adi_version",
            "tau_d_kw", "eps_i", "seed", "grids", "attacks", "prices", "resistance_scale"}
GRID_KEYS = {"id", "q_st_kah", "r_st_mohm", "c_g", "soc0", "neighbors"}
ATTACK_KEYS = {"grid", "kind", "channel", "magnitude_kw", "stddev_kw"}


@dataclass(frozen=True)
class AttackSpec:
    grid: str
    kind: str = "constant"
    channel: str = "g"
    magnitude_kw: float = 0.0
    stddev_kw: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.stddev_kw < 0:
            raise ConfigError("attack standard deviation must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    duration_h: float = 48.0
    dt_h: float = 0.25
    horizon_h: float = 6.0
    robust_horizon: int = 1
    controller: str = "robust"
    adi_version: int = 1
    tau_d_kw: float = 1e-2
    eps_i: float = 1e-3
    seed: int = 1
    grids: tuple[GridSpec, ...] = BENCHMARK_GRIDS
    attacks: tuple[AttackSpec, ...] = ()
    prices: PriceSchedule = DEFAULT_PRICES
    resistance_scale: float = field(default_factory=lambda: MicrogridParams().resistance_scale)

    def __post_init__(self) -> None:
        if self.dt_h <= 0 or self.duration_h <= 0 or self.horizon_h <= 0:
            raise ConfigError("durations must be positive")
        for name, total in (("duration_h", self.duration_h), ("horizon_h", self.horizon_h)):
            ratio = total / self.dt_h
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(f"{name} must be an integer multiple of dt_h")
        if self.controller not in ("robust", "nonrobust"):
            raise ConfigError("controller must be 'robust' or 'nonrobust'")
        if self.adi_version not in (1, 2):
            raise ConfigError("adi_version must be 1 or 2")
        if self.robust_horizon < 0:
            raise ConfigError("robust_horizon must be nonnegative")
        if self.tau_d_kw < 0 or self.eps_i <= 0:
            raise ConfigError("tau_d_kw must be nonnegative and eps_i positive")
        if self.resistance_scale <= 0:
            raise ConfigError("resistance_scale must be positive")
        ids = [g.id for g in self.grids]
        if len(set(ids)) != len(ids):
            raise ConfigError("grid ids must be unique")
        for g in self.grids:
            for nb in g.neighbors:
                if nb not in ids or nb == g.id:
                    raise ConfigError(f"grid {g.id} lists unknown neighbor {nb}")
                if g.id not in next(o for o in self.grids if o.id == nb).neighbors:
                    raise ConfigError(f"neighbor relation {g.id}-{nb} is not symmetric")
            if not 0.0 <= g.soc0 <= 1.0:
                raise ConfigError(f"initial state of charge of {g.id} outside [0, 1]")
        for a in self.attacks:
            grid = next((g for g in self.grids if g.id == a.grid), None)
            if grid is None:
                raise ConfigError(f"attack on unknown grid {a.grid}")
            if a.kind != "none" and a.channel not in ["g", "m"] + [f"tr_{n}" for n in grid.neighbors]:
                raise ConfigError(f"unknown channel {a.channel!r} for grid {a.grid}")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_h / self.dt_h))

    @property
    def n_p(self) -> int:
        return int(round(self.horizon_h / self.dt_h))

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(obj) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")


def _price_table(pairs, where: str) -> tuple[tuple[float, float, float], ...]:
    out = []
    for item in pairs:
        try:
            (lo, hi), val = item
            out.append((float(lo), float(hi), float(val)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where} entries must look like [[start, end], value]") from exc
        if not 0 <= out[-1][0] < out[-1][1] <= 24:
            raise ConfigError(f"{where} interval {lo}-{hi} is not within one day")
    return tuple(out)


def _number(v, key: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{key} must be a finite number")
    return float(v)


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    _check_keys(data, TOP_KEYS, "config")
    kw: dict[str, Any] = {}
    for key in ("duration_h", "dt_h", "horizon_h", "tau_d_kw", "eps_i", "resistance_scale"):
        if key in data:
            kw[key] = _number(data[key], key)
    for key in ("robust_horizon", "adi_version", "seed"):
        if key in data:
            if isinstance(data[key], bool) or not isinstance(data[key], int):
                raise ConfigError(f"{key} must be an integer")
            kw[key] = data[key]
    if "controller" in data:
        kw["controller"] = str(data["controller"])
    if "grids" in data:
        grids = []
        for g in data["grids"]:
            _check_keys(g, GRID_KEYS, "grid")
            missing = GRID_KEYS - set(g)
            if missing:
                raise ConfigError(f"grid entry lacks {', '.join(sorted(missing))}")
            grids.append(GridSpec(str(g["id"]), _number(g["q_st_kah"], "q_st_kah"),
                                  _number(g["r_st_mohm"], "r_st_mohm"), _number(g["c_g"], "c_g"),
                                  _number(g["soc0"], "soc0"), tuple(map(str, g["neighbors"]))))
        kw["grids"] = tuple(grids)
    if "attacks" in data:
        attacks = []
        for a in data["attacks"]:
            _check_keys(a, ATTACK_KEYS, "attack")
            if "grid" not in a:
                raise ConfigError("attack entry lacks grid")
            attacks.append(AttackSpec(str(a["grid"]), str(a.get("kind", "constant")),
                                      str(a.get("channel", "g")),
                                      _number(a.get("magnitude_kw", 0.0), "magnitude_kw"),
                                      _number(a.get("stddev_kw", 0.0), "stddev_kw")))
        kw["attacks"] = tuple(attacks)
    if "prices" in data:
        _check_keys(data["prices"], {"import", "export"}, "prices")
        try:
            kw["prices"] = PriceSchedule(_price_table(data["prices"].get("import", []), "import"),
                                         _price_table(data["prices"].get("export", []), "export"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**kw)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    return {
        "duration_h": cfg.duration_h, "dt_h": cfg.dt_h, "horizon_h": cfg.horizon_h,
        "robust_horizon": cfg.robust_horizon, "controller": cfg.controller,
        "adi_version": cfg.adi_version, "tau_d_kw": cfg.tau_d_kw, "eps_i": cfg.eps_i, "seed": cfg.seed,
        "grids": [{"id": g.id, "q_st_kah": g.q_st, "r_st_mohm": g.r_st, "c_g": g.c_g, "soc0": g.soc0,
                   "neighbors": list(g.neighbors)} for g in cfg.grids],
        "attacks": [{"grid": a.grid, "kind": a.kind, "channel": a.channel,
                     "magnitude_kw": a.magnitude_kw, "stddev_kw": a.stddev_kw} for a in cfg.attacks],
        "prices": {"import": [[[lo, hi], v] for lo, hi, v in cfg.prices.import_],
                   "export": [[[lo, hi], v] for lo, hi, v in cfg.prices.export]},
        "resistance_scale": cfg.resistance_scale,
    }
