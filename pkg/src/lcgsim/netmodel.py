"""Physical scenario: devices, operators, flow sessions and the link model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

BAND_POLICIES = ("per-outdegree", "full-band")


class ScenarioError(ValueError):
    """Raised for an inconsistent or physically invalid scenario."""


@dataclass(frozen=True)
class Device:
    id: int
    operator: int
    position: tuple[float, float]
    max_power: float

    def __post_init__(self):
        if not self.max_power > 0:
            raise ScenarioError(f"device {self.id}: max_power must be > 0")


@dataclass(frozen=True)
class Operator:
    id: int
    devices: frozenset[int]
    flows: frozenset[int]


@dataclass(frozen=True)
class FlowSession:
    id: int
    owner: int
    source: int
    destination: int
    demand: float  # bit/s

    def __post_init__(self):
        if self.source == self.destination:
            raise ScenarioError(f"flow {self.id}: source equals destination")
        if not self.demand > 0:
            raise ScenarioError(f"flow {self.id}: demand must be > 0")


@dataclass(frozen=True)
class RadioParams:
    beta: float = 62.5
    path_loss_exp: float = 4.0
    noise_power: float = 1e-12  # W, -90 dBm
    bandwidth: float = 2e6  # Hz

    def __post_init__(self):
        for name in ("beta", "path_loss_exp", "noise_power", "bandwidth"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"radio.{name} must be > 0")
        if self.path_loss_exp < 2:
            raise ScenarioError("radio.path_loss_exp must be >= 2")


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class NetworkInstance:
    devices: tuple[Device, ...]
    operators: tuple[Operator, ...]
    flows: tuple[FlowSession, ...]
    radio: RadioParams
    area: tuple[float, float]
    band_policy: str = "per-outdegree"
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.band_policy not in BAND_POLICIES:
            raise ScenarioError(f"unknown band policy {self.band_policy!r}")
        width, height = self.area
        if not (width > 0 and height > 0):
            raise ScenarioError("area must have positive width and height")
        by_id = {d.id: d for d in self.devices}
        if len(by_id) != len(self.devices):
            raise ScenarioError("duplicate device id")
        object.__setattr__(self, "_by_id", by_id)
        for d in self.devices:
            x, y = d.position
            if not (0 <= x <= width and 0 <= y <= height):
                raise ScenarioError(f"device {d.id} lies outside the area")
        op_ids = {op.id for op in self.operators}
        seen: set[int] = set()
        for op in self.operators:
            if seen & op.devices:
                raise ScenarioError("operators share a device")
            seen |= op.devices
            for dev in op.devices:
                if dev not in by_id or by_id[dev].operator != op.id:
                    raise ScenarioError(f"operator {op.id}: bad device {dev}")
        flow_ids = {f.id for f in self.flows}
        for f in self.flows:
            if f.owner not in op_ids:
                raise ScenarioError(f"flow {f.id}: unknown owner {f.owner}")
            for end in (f.source, f.destination):
                if end not in by_id or by_id[end].operator != f.owner:
                    raise ScenarioError(f"flow {f.id}: endpoint {end} not owned by {f.owner}")
        for op in self.operators:
            if not op.flows <= flow_ids:
                raise ScenarioError(f"operator {op.id}: unknown flow")

    def device(self, device_id: int) -> Device:
        return self._by_id[device_id]

    @property
    def device_ids(self) -> list[int]:
        return [d.id for d in self.devices]

    @property
    def operator_ids(self) -> list[int]:
        return sorted(op.id for op in self.operators)

    def distance(self, i: int, j: int) -> float:
        (x1, y1), (x2, y2) = self._by_id[i].position, self._by_id[j].position
        return math.hypot(x1 - x2, y1 - y2)

    def flows_of(self, operator: int) -> list[FlowSession]:
        return [f for f in self.flows if f.owner == operator]


def channel_gain(distance: float, radio: RadioParams) -> float:
    """Path-loss gain ``beta * d**-n``; distance in meters, must be positive."""
    if not distance > 0:
        raise ScenarioError(f"channel gain undefined at distance {distance}")
    return radio.beta * distance ** (-radio.path_loss_exp)


def link_capacity(tx: Device, rx: Device, radio: RadioParams, band_share: float = 1.0) -> float:
    """Shannon capacity in bit/s of the link tx -> rx on a fraction of the band."""
    if tx.id == rx.id:
        raise ScenarioError("link from a device to itself")
    if not 0 < band_share <= 1:
        raise ScenarioError(f"band_share must lie in (0, 1], got {band_share}")
    d = math.hypot(tx.position[0] - rx.position[0], tx.position[1] - rx.position[1])
    snr = tx.max_power * channel_gain(d, radio) / radio.noise_power
    return band_share * radio.bandwidth * math.log2(1.0 + snr)


def cooperating_operators(operators: Iterable[int], coalitions: Iterable[Iterable[int]]) -> dict[int, frozenset[int]]:
    """Map each operator to the operators it shares at least one coalition with (itself included)."""
    ops = set(operators)
    partners = {h: {h} for h in ops}
    for coalition in coalitions:
        members = set(coalition)
        unknown = members - ops
        if unknown:
            raise ScenarioError(f"unknown operator id(s) {sorted(unknown)}")
        for h in members:
            partners[h] |= members
    return {h: frozenset(p) for h, p in partners.items()}


def adjacency(instance: NetworkInstance, coalition_view: Iterable[Iterable[int]]) -> dict[int, frozenset[int]]:
    """Candidate neighbor set of every device under a coalition view.

    Operators not mentioned by the view are treated as standing alone.
    """
    view = [tuple(c) for c in coalition_view]
    if not view:
        raise ScenarioError("coalition view must be non-empty")
    partners = cooperating_operators(instance.operator_ids, view)
    by_op: dict[int, list[int]] = {}
    for d in instance.devices:
        by_op.setdefault(d.operator, []).append(d.id)
    out = {}
    for d in instance.devices:
        allowed = [dev for h in partners[d.operator] for dev in by_op.get(h, ())]
        out[d.id] = frozenset(allowed) - {d.id}
    return out


def allowed_pairs(instance: NetworkInstance, coalition_view: Iterable[Iterable[int]]) -> frozenset[tuple[int, int]]:
    """Operator pairs (a < b) allowed to link devices; identifies the induced adjacency."""
    partners = cooperating_operators(instance.operator_ids, [tuple(c) for c in coalition_view])
    return frozenset((a, b) for a, ps in partners.items() for b in ps if a < b)


def capacities(instance: NetworkInstance, edges: Iterable[tuple[int, int]]) -> dict[tuple[int, int], float]:
    """Capacity of every edge in ``edges`` under the instance's band policy."""
    edges = list(edges)
    outdeg: dict[int, int] = {}
    for i, _ in edges:
        outdeg[i] = outdeg.get(i, 0) + 1
    full = instance.band_policy == "full-band"
    return {
        (i, j): link_capacity(instance.device(i), instance.device(j), instance.radio,
                              1.0 if full else 1.0 / outdeg[i])
        for i, j in edges
    }


def capacity_table(instance: NetworkInstance) -> Mapping[tuple[int, int], float]:
    """Full-band capacity of every ordered device pair."""
    return {
        (a.id, b.id): link_capacity(a, b, instance.radio)
        for a in instance.devices for b in instance.devices if a.id != b.id
    }
