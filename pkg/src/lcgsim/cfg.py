"""Operator layer: overlapping coalition structures, the extended recursive core,
distributed coalition formation and the two comparison baselines.

Utilities are non-transferable. An operator earns revenue for the rate of its
own flows, pays for every device that transmits one of its flows, and pays
``C * (|S| - 1)`` for each coalition S it belongs to.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

from .cgg import CGGResult, DeviceGame, run_cgg
from .netmodel import NetworkInstance, allowed_pairs
from .scenario import KBPS, EconParams

MAX_EXACT_OPERATORS = 4
UTILITY_TOL = 1e-9

Coalition = tuple[int, ...]


class CoalitionError(ValueError):
    pass


@dataclass(frozen=True)
class CoalitionStructure:
    """Cover of the operator set by distinct non-empty coalitions, in canonical order."""

    coalitions: tuple[Coalition, ...]

    def __post_init__(self):
        canon = tuple(sorted({tuple(sorted(set(c))) for c in self.coalitions}))
        if not canon or any(not c for c in canon):
            raise CoalitionError("a coalition structure needs non-empty coalitions")
        object.__setattr__(self, "coalitions", canon)

    @classmethod
    def of(cls, coalitions: Iterable[Iterable[int]], players: Iterable[int] | None = None) -> "CoalitionStructure":
        cs = cls(tuple(tuple(c) for c in coalitions))
        if players is not None and cs.players != frozenset(players):
            raise CoalitionError(f"{cs} does not cover exactly {sorted(players)}")
        return cs

    @classmethod
    def singletons(cls, players: Iterable[int]) -> "CoalitionStructure":
        return cls(tuple((h,) for h in players))

    @classmethod
    def parse(cls, text: str) -> "CoalitionStructure":
        parts = [p.strip().strip("{}") for p in text.split("|")]
        return cls(tuple(tuple(int(x) for x in p.split(",") if x.strip()) for p in parts))

    @property
    def players(self) -> frozenset[int]:
        return frozenset(h for c in self.coalitions for h in c)

    def memberships(self, h: int) -> tuple[Coalition, ...]:
        return tuple(c for c in self.coalitions if h in c)

    def overlapping(self) -> frozenset[int]:
        return frozenset(h for h in self.players if len(self.memberships(h)) > 1)

    @property
    def is_partition(self) -> bool:
        return sum(len(c) for c in self.coalitions) == len(self.players)

    def reduced(self) -> "CoalitionStructure":
        """Drop singleton coalitions of players already covered by a larger coalition."""
        big = {h for c in self.coalitions if len(c) > 1 for h in c}
        return CoalitionStructure(tuple(c for c in self.coalitions if len(c) > 1 or c[0] not in big))

    def __str__(self):
        return "|".join("{" + ",".join(map(str, c)) + "}" for c in self.coalitions)


@dataclass(frozen=True)
class Outcome:
    utilities: tuple[tuple[int, float], ...]
    structure: CoalitionStructure

    @property
    def x(self) -> dict[int, float]:
        return dict(self.utilities)

    @property
    def aggregate(self) -> float:
        return math.fsum(u for _, u in self.utilities)

    def equivalent(self, other: "Outcome", tol: float = 1e-6) -> bool:
        a, b = self.x, other.x
        return a.keys() == b.keys() and all(abs(a[h] - b[h]) <= tol * max(1.0, abs(a[h])) for h in a)


def coalition_cost(structure: CoalitionStructure, h: int, cost: float) -> float:
    """Total coordination cost of operator ``h``: C * (|S| - 1) summed over its coalitions."""
    return sum(cost * (len(c) - 1) for c in structure.memberships(h))


class OperatorGame:
    """Partition-form utility oracle for one instance.

    Each structure is priced by running the device game under the adjacency
    it induces. Structures inducing the same set of cooperating operator pairs
    share one device-game run.
    """

    def __init__(self, instance: NetworkInstance, econ: EconParams, rng_seed: int):
        self.instance = instance
        self.econ = econ
        self.seed = rng_seed
        self._cgg: dict[frozenset, CGGResult] = {}
        self._util: dict[CoalitionStructure, Outcome] = {}

    def device_game(self, structure: CoalitionStructure) -> CGGResult:
        key = allowed_pairs(self.instance, structure.coalitions)
        res = self._cgg.get(key)
        if res is None:
            res = self._cgg[key] = run_cgg(self.instance, structure.coalitions, self.seed,
                                           game=DeviceGame(self.instance, structure.coalitions))
        return res

    @property
    def cgg_runs(self) -> list[CGGResult]:
        return list(self._cgg.values())

    def gross(self, h: int, res: CGGResult) -> float:
        """Revenue minus device costs of operator ``h`` (before coalition costs)."""
        a = res.assignment
        total = 0.0
        for f in self.instance.flows_of(h):
            total += self.econ.revenue_rate * a.achieved.get(f.id, 0.0) / KBPS
            total -= sum(self.econ.device_cost * self.instance.device(i).max_power
                         for i in sorted(a.flow_nodes(f.id)))
        return total

    def evaluate(self, structure: CoalitionStructure) -> Outcome:
        out = self._util.get(structure)
        if out is None:
            res = self.device_game(structure)
            ops = sorted(structure.players | set(self.instance.operator_ids))
            u = tuple((h, self.gross(h, res) - coalition_cost(structure, h, self.econ.coalition_cost))
                      for h in ops)
            out = self._util[structure] = Outcome(u, structure)
        return out


def evaluate_structure(structure: CoalitionStructure, instance: NetworkInstance, econ: EconParams,
                       rng_seed: int) -> Outcome:
    return OperatorGame(instance, econ, rng_seed).evaluate(structure)


def coalition_utility(outcome: Outcome, coalition: Iterable[int]) -> float:
    """Utility of a coalition: the sum of its members' utilities."""
    x = outcome.x
    return math.fsum(x[h] for h in coalition)


# --------------------------------------------------------------------------
# covers


def _nonempty_subsets(players: Sequence[int]) -> list[Coalition]:
    return [c for k in range(1, len(players) + 1) for c in combinations(players, k)]


def enumerate_covers(players: int | Iterable[int]) -> list[CoalitionStructure]:
    """All covers of the player set (operators ``1..n`` when given a count)."""
    ps = list(range(1, players + 1)) if isinstance(players, int) else sorted(set(players))
    if len(ps) > MAX_EXACT_OPERATORS:
        raise CoalitionError(f"{len(ps)} players is too many to enumerate covers; use run_cfg")
    if not ps:
        return []
    subsets = _nonempty_subsets(ps)
    masks = [sum(1 << ps.index(h) for h in c) for c in subsets]
    full = (1 << len(ps)) - 1
    out = []
    for pick in range(1, 1 << len(subsets)):
        union = 0
        chosen = []
        for b, (c, m) in enumerate(zip(subsets, masks)):
            if pick >> b & 1:
                union |= m
                chosen.append(c)
        if union == full:
            out.append(CoalitionStructure(tuple(chosen)))
    return sorted(out, key=lambda s: (len(s.coalitions), s.coalitions))


# --------------------------------------------------------------------------
# residual games and the extended recursive core


@dataclass(frozen=True)
class ResidualGame:
    """Game left to ``players`` while ``fixed`` coalitions stay as they are."""

    players: frozenset[int]
    fixed: tuple[Coalition, ...] = ()
    kind: str = "complete"

    def structures(self) -> list[CoalitionStructure]:
        """Full structures reachable by the residual players' reactions."""
        if not self.players:
            return [CoalitionStructure(self.fixed)] if self.fixed else []
        return [CoalitionStructure(self.fixed + c.coalitions) for c in enumerate_covers(self.players)]


def residual_game(deviators: Iterable[int], deviation_kind: str, current: CoalitionStructure,
                  abandoned: Iterable[Iterable[int]] | None = None,
                  deviator_structure: CoalitionStructure | None = None) -> ResidualGame:
    """Residual game after ``deviators`` leave ``current``.

    complete: residuals are everyone else; the deviators' new structure (if
    given) is held fixed. partial: each deviator must sit in two or more
    coalitions; the ``abandoned`` coalitions (default: every coalition of a
    deviator that holds a non-deviator) dissolve, the remaining coalitions
    are kept, and the other members of the abandoned coalitions react.
    """
    S = frozenset(deviators)
    H = current.players
    if not S:
        raise CoalitionError("deviating coalition must be non-empty")
    if not S <= H:
        raise CoalitionError(f"deviators {sorted(S - H)} are not players")
    if deviation_kind == "complete":
        fixed = deviator_structure.coalitions if deviator_structure else ()
        if deviator_structure and deviator_structure.players != S:
            raise CoalitionError("deviator structure must cover exactly the deviators")
        return ResidualGame(H - S, fixed, "complete")
    if deviation_kind != "partial":
        raise CoalitionError(f"unknown deviation kind {deviation_kind!r}")
    lone = [h for h in S if len(current.memberships(h)) < 2]
    if lone:
        raise CoalitionError(f"operators {sorted(lone)} are not overlapping; partial deviation impossible")
    if abandoned is None:
        drop = {c for c in current.coalitions if set(c) & S and not set(c) <= S}
    else:
        drop = {tuple(sorted(c)) for c in abandoned}
        if not drop <= set(current.coalitions):
            raise CoalitionError("abandoned coalitions must belong to the current structure")
        if any(not set(c) & S for c in drop):
            raise CoalitionError("every abandoned coalition must contain a deviator")
    kept = tuple(c for c in current.coalitions if c not in drop)
    for h in S:
        if not any(h in c for c in kept):
            raise CoalitionError(f"deviator {h} abandons all its coalitions; that is a complete deviation")
    residual = frozenset(h for c in drop for h in c) - S
    return ResidualGame(residual, kept, "partial")


def better_for(y: dict[int, float], x: dict[int, float], members: Iterable[int], tol: float = UTILITY_TOL) -> bool:
    """``y >_S x``: nobody in S worse off and somebody strictly better off."""
    members = list(members)
    scale = lambda h: tol * max(1.0, abs(x[h]))  # noqa: E731
    return (all(y[h] >= x[h] - scale(h) for h in members)
            and any(y[h] > x[h] + scale(h) for h in members))


@dataclass
class Deviation:
    coalition: frozenset[int]
    deviator_structure: CoalitionStructure
    result: Outcome


class CoreSolver:
    """Exact extended recursive core by induction on the number of residual players.

    ``optimistic`` deviators need one favourable residual reaction; otherwise
    they need every reaction in the assumption set to be favourable.
    """

    def __init__(self, game: OperatorGame, optimistic: bool = True):
        self.game = game
        self.optimistic = optimistic
        self._core: dict[tuple, list[Outcome]] = {}

    def outcomes(self, residual: ResidualGame) -> list[Outcome]:
        return [self.game.evaluate(s) for s in residual.structures()]

    def assumption(self, residual: ResidualGame) -> list[Outcome]:
        """Core of the residual game if non-empty, else all of its outcomes."""
        if not residual.players:
            return self.outcomes(residual)
        return self.core(residual) or self.outcomes(residual)

    def core(self, residual: ResidualGame) -> list[Outcome]:
        key = (residual.players, residual.fixed)
        got = self._core.get(key)
        if got is None:
            got = [o for o in self.outcomes(residual) if self.find_deviation(o, residual) is None]
            self._core[key] = got
        return got

    def find_deviation(self, outcome: Outcome, residual: ResidualGame) -> Deviation | None:
        """A coalition of residual players and a deviation that dominates ``outcome``, if any."""
        x = outcome.x
        R = sorted(residual.players)
        for T in _nonempty_subsets(R):
            T = frozenset(T)
            rest = residual.players - T
            for pi_T in enumerate_covers(T):
                sub = ResidualGame(rest, residual.fixed + pi_T.coalitions)
                reactions = self.assumption(sub)
                wins = [y for y in reactions if better_for(y.x, x, T)]
                if wins and (self.optimistic or len(wins) == len(reactions)):
                    return Deviation(T, pi_T, wins[0])
        return None

    def dominates(self, candidate: Outcome, incumbent: Outcome, deviating: Iterable[int]) -> bool:
        """Whether ``candidate`` arises from a deviation by ``deviating`` that dominates ``incumbent``.

        The candidate structure must split into a cover of the deviators and a
        reaction of the rest that lies in the residual assumption set, and the
        deviators must be better off in the ``>_S`` sense.
        """
        S = frozenset(deviating)
        H = incumbent.structure.players
        mine = tuple(c for c in candidate.structure.coalitions if set(c) <= S)
        theirs = tuple(c for c in candidate.structure.coalitions if not set(c) & S)
        if len(mine) + len(theirs) != len(candidate.structure.coalitions) or not mine:
            return False
        if not better_for(candidate.x, incumbent.x, S):
            return False
        reactions = self.assumption(ResidualGame(H - S, mine))
        return any(r.structure == candidate.structure for r in reactions)

    def gamma_core(self) -> list[Outcome]:
        return self.core(ResidualGame(frozenset(self.game.instance.operator_ids)))


def gamma_core_exact(instance: NetworkInstance, econ: EconParams, rng_seed: int,
                     optimistic: bool = True, game: OperatorGame | None = None) -> list[Outcome]:
    """Every undominated outcome of the operator game (small operator counts only)."""
    if len(instance.operator_ids) > MAX_EXACT_OPERATORS:
        raise CoalitionError(f"exact core limited to {MAX_EXACT_OPERATORS} operators; use run_cfg")
    game = game or OperatorGame(instance, econ, rng_seed)
    return CoreSolver(game, optimistic).gamma_core()


# --------------------------------------------------------------------------
# distributed formation


@dataclass
class History:
    """Coalition sets each operator has held, with the utility it had there."""

    entries: dict[int, list[tuple[tuple[Coalition, ...], float]]] = field(default_factory=dict)

    def seen(self, h: int, gamma: tuple[Coalition, ...], utility: float) -> bool:
        return any(g == gamma and abs(u - utility) <= UTILITY_TOL * max(1.0, abs(u))
                   for g, u in self.entries.get(h, ()))

    def record(self, outcome: Outcome) -> None:
        for h, u in outcome.utilities:
            gamma = outcome.structure.memberships(h)
            if not self.seen(h, gamma, u):
                self.entries.setdefault(h, []).append((gamma, u))


@dataclass
class CFGResult:
    outcome: Outcome
    rounds: int
    moves: list[tuple[int, str, str]]
    history: History
    game: OperatorGame
    blocked: int = 0

    @property
    def cgg_iterations(self) -> list[int]:
        return [r.iterations for r in self.game.cgg_runs]


def _replace(structure: CoalitionStructure, old: Coalition, new: Iterable[Coalition]) -> CoalitionStructure:
    rest = [c for c in structure.coalitions if c != old] + [c for c in new if c]
    players = structure.players
    covered = {h for c in rest for h in c}
    rest += [(h,) for h in sorted(players - covered)]
    return CoalitionStructure(tuple(rest)).reduced()


class _Formation:
    def __init__(self, game: OperatorGame, rng: random.Random):
        self.game = game
        self.rng = rng
        self.history = History()
        self.moves: list[tuple[int, str, str]] = []
        self.blocked = 0
        self.rejected = 0

    def snapshot(self):
        return {h: list(v) for h, v in self.history.entries.items()}, len(self.moves)

    def restore(self, saved) -> None:
        entries, n_moves = saved
        self.history.entries = entries
        del self.moves[n_moves:]
        self.rejected += 1

    def try_move(self, current: Outcome, new_structure: CoalitionStructure, movers: Iterable[int],
                 label: str, round_no: int, gated: bool = True) -> Outcome | None:
        """Adopt ``new_structure`` if every mover strictly gains and, for a ``gated`` move, no
        operator whose coalition set changes has already held it at the same utility.

        Leaving is never gated: it only shrinks coalitions, so it cannot close a cycle on its own.
        """
        if new_structure == current.structure:
            return None
        new = self.game.evaluate(new_structure)
        x, y = current.x, new.x
        movers = sorted(movers)
        if not all(y[h] > x[h] + UTILITY_TOL * max(1.0, abs(x[h])) for h in movers):
            return None
        changed = [h for h in new.x if new_structure.memberships(h) != current.structure.memberships(h)]
        if gated and any(self.history.seen(h, new_structure.memberships(h), y[h]) for h in changed):
            self.blocked += 1
            return None
        self.history.record(new)
        self.moves.append((round_no, label, str(new_structure)))
        return new

    def leave_moves(self, h: int, current: Outcome, only_touching: frozenset[int] = frozenset()):
        for c in current.structure.memberships(h):
            if len(c) > 1 and (not only_touching or set(c) & only_touching):
                yield _replace(current.structure, c, [tuple(m for m in c if m != h)]), f"{h} leaves {set(c)}"


def run_cfg(instance: NetworkInstance, econ: EconParams, rng_seed: int, max_rounds: int = 200,
            game: OperatorGame | None = None) -> CFGResult:
    """Distributed overlapping coalition formation from the all-singleton structure.

    Each round visits operators in a seeded random order. On its turn an
    operator weighs three kinds of move: leaving one of its coalitions,
    joining an existing coalition, and forming a new coalition with one or
    more partners (pairs first, partners in random order). Every operator whose
    coalition set changes must strictly gain, except that leaving needs no
    one's consent, and no such operator may return to a recorded
    (coalition set, utility) pair. The mover takes the admissible move it
    values most. After a join or a new coalition, operators sharing a coalition
    with the enlarged coalition react once each by leaving or joining; the
    move stands only if every mover still strictly gains once they have. The
    run ends after a round with no change.
    """
    game = game or OperatorGame(instance, econ, rng_seed)
    rng = random.Random(rng_seed ^ 0x5F3759DF)
    ops = instance.operator_ids
    current = game.evaluate(CoalitionStructure.singletons(ops))
    form = _Formation(game, rng)
    form.history.record(current)
    rounds = 0
    while True:
        rounds += 1
        if rounds > max_rounds:
            raise RuntimeError(f"coalition formation did not settle in {max_rounds} rounds")
        changed = False
        for h in rng.sample(ops, len(ops)):
            options = [(s, lbl, [h], None) for s, lbl in form.leave_moves(h, current)]
            for c in current.structure.coalitions:
                if h not in c and len(c) > 1:
                    grown = tuple(sorted(c + (h,)))
                    options.append((_replace(current.structure, c, [grown]), f"{h} joins {set(c)}",
                                    list(grown), frozenset(grown)))
            others = rng.sample([g for g in ops if g != h], len(ops) - 1)
            fresh = [tuple(sorted(partners + (h,))) for k in range(1, len(others) + 1)
                     for partners in combinations(others, k)]
            fresh = [c for c in fresh if c not in current.structure.coalitions]
            for new_c in fresh:
                structure = CoalitionStructure(current.structure.coalitions + (new_c,)).reduced()
                kind = "pair" if len(new_c) == 2 else "form"
                options.append((structure, f"{kind} {set(new_c)}", list(new_c), frozenset(new_c)))
            new = _first_admissible(form, current, h, options, rounds)
            if new is not None:
                current, changed = new, True
        if not changed:
            break
    return CFGResult(current, rounds, form.moves, form.history, game, form.blocked)


def _first_admissible(form: _Formation, current: Outcome, h: int, options: list, round_no: int) -> Outcome | None:
    """Adopt the admissible option ``h`` values most; None if there is none."""
    # stable sort keeps the random partner order among equally valued moves
    options.sort(key=lambda o: -form.game.evaluate(o[0]).x[h])
    for structure, label, movers, grown in options:
        saved = form.snapshot()
        new = form.try_move(current, structure, movers, label, round_no, gated=grown is not None)
        if new is None:
            continue
        if grown is not None:
            settled = _react(form, current=new, grown=grown, round_no=round_no)
            # the movers look one step ahead: a move the reactions would make unprofitable is not made
            if not all(settled.x[m] > current.x[m] + UTILITY_TOL * max(1.0, abs(current.x[m]))
                       for m in movers):
                form.restore(saved)
                continue
            new = settled
        return new
    return None


def _react(form: _Formation, current: Outcome, grown: frozenset[int], round_no: int) -> Outcome:
    affected = sorted({g for c in current.structure.coalitions if set(c) & grown for g in c} - grown)
    target = tuple(sorted(grown))
    for g in form.rng.sample(affected, len(affected)):
        options = [(s, lbl, [g], False) for s, lbl in form.leave_moves(g, current, grown)]
        if target in current.structure.coalitions:
            joined = _replace(current.structure, target, [tuple(sorted(grown | {g}))])
            options.append((joined, f"{g} joins {set(target)}", sorted(grown | {g}), True))
        options.sort(key=lambda o: -form.game.evaluate(o[0]).x[g])
        for structure, label, movers, gated in options:
            new = form.try_move(current, structure, movers, label, round_no, gated)
            if new is not None:
                current = new
                break
    return current


def run_variant_merge_only(instance: NetworkInstance, econ: EconParams, rng_seed: int,
                           game: OperatorGame | None = None) -> Outcome:
    """Non-overlapping baseline: merge two coalitions whenever every member of the union strictly gains."""
    game = game or OperatorGame(instance, econ, rng_seed)
    rng = random.Random(rng_seed ^ 0x2545F491)
    current = game.evaluate(CoalitionStructure.singletons(instance.operator_ids))
    merged = True
    while merged:
        merged = False
        blocks = list(current.structure.coalitions)
        pairs = [(a, b) for a, b in combinations(blocks, 2)]
        for a, b in rng.sample(pairs, len(pairs)):
            union = tuple(sorted(a + b))
            rest = [c for c in blocks if c not in (a, b)]
            new = game.evaluate(CoalitionStructure(tuple(rest) + (union,)))
            x, y = current.x, new.x
            if all(y[h] > x[h] + UTILITY_TOL * max(1.0, abs(x[h])) for h in union):
                current, merged = new, True
                break
    return current


def run_non_cooperative(instance: NetworkInstance, econ: EconParams, rng_seed: int,
                        game: OperatorGame | None = None) -> Outcome:
    game = game or OperatorGame(instance, econ, rng_seed)
    return game.evaluate(CoalitionStructure.singletons(instance.operator_ids))
