"""Scenario configuration and random instance generation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .netmodel import (BAND_POLICIES, Device, FlowSession, NetworkInstance, Operator,
                       RadioParams, ScenarioError, dbm_to_watt)

MODES = ("lcg", "lcg-variant", "non-coop", "core-exact")
LAYERS = ("both", "device")
MIN_SEPARATION = 1.0  # m
KBPS = 1000.0


@dataclass(frozen=True)
class EconParams:
    revenue_rate: float = 120.0  # utility per kbit/s per time unit
    device_cost: float = 500.0  # utility per W per time unit
    coalition_cost: float = 5.0

    def __post_init__(self):
        for name in ("revenue_rate", "device_cost", "coalition_cost"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"econ.{name} must be >= 0")

# Effective bandwidth of the simulated scenarios. With 2 MHz every 10-20 kbit/s
# demand is met by the direct link at any distance in the area, so no relaying
# would ever occur; 1 kHz puts link capacities on the scale of the demands.
DEFAULT_RADIO = RadioParams(bandwidth=1e3)


@dataclass(frozen=True)
class ScenarioConfig:
    area: tuple[float, float] = (1000.0, 1000.0)
    n_operators: int = 4
    devices_per_operator: tuple[int, int] = (3, 8)  # inclusive range; equal ends fix the count
    flows_per_operator: int = 1
    demand_range: tuple[float, float] = (10.0, 20.0)  # kbit/s
    max_power: float = 0.02  # W
    radio: RadioParams = field(default_factory=lambda: DEFAULT_RADIO)
    econ: EconParams = field(default_factory=EconParams)
    band_policy: str = "per-outdegree"
    runs: int = 1
    base_seed: int = 0
    mode: str = "lcg"
    # "device" skips the operator layer and plays the device game under the grand coalition
    layer: str = "both"
    pessimistic: bool = False

    def __post_init__(self):
        if not (self.area[0] > 0 and self.area[1] > 0):
            raise ScenarioError("area must have positive width and height")
        if self.n_operators < 1 or self.flows_per_operator < 1 or self.runs < 1:
            raise ScenarioError("counts (operators, flows, runs) must be positive")
        lo, hi = self.devices_per_operator
        if lo < 2 or hi < lo:
            raise ScenarioError("each operator needs at least 2 devices to host a flow")
        dlo, dhi = self.demand_range
        if not (0 < dlo <= dhi):
            raise ScenarioError("demand range must be a non-empty positive interval")
        if self.max_power <= 0:
            raise ScenarioError("max_power must be > 0")
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}")
        if self.layer not in LAYERS:
            raise ScenarioError(f"layer must be one of {LAYERS}")
        if self.band_policy not in BAND_POLICIES:
            raise ScenarioError(f"band_policy must be one of {BAND_POLICIES}")

    def with_devices(self, per_operator: int) -> "ScenarioConfig":
        return replace(self, devices_per_operator=(per_operator, per_operator))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["area"] = list(self.area)
        d["devices_per_operator"] = list(self.devices_per_operator)
        d["demand_range"] = list(self.demand_range)
        return d


def _pair(value, name) -> tuple:
    if isinstance(value, (int, float)):
        return (value, value)
    if len(value) != 2:
        raise ScenarioError(f"{name} must be a number or a [low, high] pair")
    return tuple(value)


def config_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
    radio = dict(raw.pop("radio", {}) or {})
    if "noise_dbm" in radio:
        radio["noise_power"] = dbm_to_watt(radio.pop("noise_dbm"))
    kwargs: dict[str, Any] = {}
    if radio:
        kwargs["radio"] = RadioParams(**{**asdict(DEFAULT_RADIO), **radio})
    if "econ" in raw:
        kwargs["econ"] = EconParams(**(raw.pop("econ") or {}))
    for key in ("area", "devices_per_operator", "demand_range"):
        if key in raw:
            kwargs[key] = _pair(raw.pop(key), key)
    kwargs.update(raw)
    return ScenarioConfig(**kwargs)


def load_config(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def sub_seeds(seed: int) -> dict[str, int]:
    """Independent child seeds for placement, traffic and play order.

    Children of ``numpy.random.SeedSequence(seed)`` in the fixed order
    placement, traffic, play; each child is reduced to one 32-bit word.
    """
    children = np.random.SeedSequence(seed).spawn(3)
    words = [int(c.generate_state(1)[0]) for c in children]
    return dict(zip(("placement", "traffic", "play"), words))


def generate_scenario(config: ScenarioConfig, seed: int) -> NetworkInstance:
    seeds = sub_seeds(seed)
    place = np.random.default_rng(seeds["placement"])
    traffic = np.random.default_rng(seeds["traffic"])
    lo, hi = config.devices_per_operator
    counts = [int(traffic.integers(lo, hi + 1)) for _ in range(config.n_operators)]
    if config.flows_per_operator > min(c * (c - 1) for c in counts):
        raise ScenarioError("too many flows for the device counts")
    width, height = config.area
    positions: list[tuple[float, float]] = []
    while len(positions) < sum(counts):
        x, y = place.uniform(0, width), place.uniform(0, height)
        if all(math.hypot(x - a, y - b) >= MIN_SEPARATION for a, b in positions):
            positions.append((float(x), float(y)))
    devices, operators, flows = [], [], []
    next_dev = 0
    dlo, dhi = config.demand_range
    for op_index, count in enumerate(counts):
        op = op_index + 1
        ids = list(range(next_dev, next_dev + count))
        next_dev += count
        devices += [Device(i, op, positions[i], config.max_power) for i in ids]
        op_flows = []
        used: set[tuple[int, int]] = set()
        while len(op_flows) < config.flows_per_operator:
            s, d = (int(v) for v in traffic.choice(ids, size=2, replace=False))
            if (s, d) in used:
                continue
            used.add((s, d))
            demand = float(traffic.uniform(dlo, dhi)) * KBPS
            op_flows.append(FlowSession(len(flows) + len(op_flows), op, s, d, demand))
        flows += op_flows
        operators.append(Operator(op, frozenset(ids), frozenset(f.id for f in op_flows)))
    return NetworkInstance(tuple(devices), tuple(operators), tuple(flows), config.radio,
                           config.area, config.band_policy)
