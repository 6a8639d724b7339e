"""Independent reference computations used only by the tests."""

from itertools import chain, combinations

import numpy as np
from scipy.optimize import linprog


def lp_max_total_rate(capacities, flows):
    """Optimal total rate of the capped multi-commodity flow LP (scipy HiGHS).

    Variables: one rate per (edge, flow) followed by one achieved rate per flow.
    """
    edges = sorted(capacities)
    nodes = sorted({n for e in edges for n in e} | {n for f in flows for n in (f.source, f.destination)})
    E, F = len(edges), len(flows)
    nvar = E * F + F
    c = np.zeros(nvar)
    c[E * F:] = -1.0
    a_eq, b_eq = [], []
    for k, f in enumerate(flows):
        for n in nodes:
            row = np.zeros(nvar)
            for idx, (u, v) in enumerate(edges):
                if u == n:
                    row[k * E + idx] += 1
                if v == n:
                    row[k * E + idx] -= 1
            if n == f.source:
                row[E * F + k] = -1
            elif n == f.destination:
                row[E * F + k] = 1
            a_eq.append(row)
            b_eq.append(0.0)
    a_ub, b_ub = [], []
    for idx, e in enumerate(edges):
        row = np.zeros(nvar)
        for k in range(F):
            row[k * E + idx] = 1
        a_ub.append(row)
        b_ub.append(capacities[e])
    bounds = [(0, None)] * (E * F) + [(0, f.demand) for f in flows]
    res = linprog(c, A_ub=np.array(a_ub) if a_ub else None, b_ub=b_ub or None,
                  A_eq=np.array(a_eq), b_eq=b_eq, bounds=bounds, method="highs")
    assert res.status == 0, res.message
    return -res.fun


def brute_force_covers(n):
    """Covers of {1..n} (or of the given players): every family of distinct non-empty subsets
    whose union is everything."""
    players = range(1, n + 1) if isinstance(n, int) else sorted(n)
    subsets = [frozenset(c) for k in range(1, len(players) + 1) for c in combinations(players, k)]
    found = set()
    for k in range(1, len(subsets) + 1):
        for family in combinations(subsets, k):
            if frozenset(chain.from_iterable(family)) == frozenset(players):
                found.add(frozenset(family))
    return found


def recursive_core(players, value, optimistic=True, tol=1e-9):
    """Extended recursive core straight from its inductive definition.

    ``value(family)`` maps a family of coalitions (frozensets) covering every
    player to a dict of utilities. Returns the undominated families.
    """
    memo = {}

    def improves(y, x, group):
        scale = {h: tol * max(1.0, abs(x[h])) for h in group}
        return (all(y[h] >= x[h] - scale[h] for h in group)
                and any(y[h] > x[h] + scale[h] for h in group))

    def families(rest, fixed):
        if not rest:
            return [fixed]
        return [fixed | cover for cover in brute_force_covers(rest)]

    def core(rest, fixed):
        key = (rest, fixed)
        if key not in memo:
            memo[key] = [fam for fam in families(rest, fixed) if not dominated(fam, rest, fixed)]
        return memo[key]

    def dominated(fam, rest, fixed):
        x = value(fam)
        for k in range(1, len(rest) + 1):
            for group in map(frozenset, combinations(sorted(rest), k)):
                others = rest - group
                for cover in brute_force_covers(group):
                    reacted = fixed | cover
                    assumed = (core(others, reacted) or families(others, reacted)) if others else [reacted]
                    wins = [improves(value(f), x, group) for f in assumed]
                    if any(wins) if optimistic else all(wins):
                        return True
        return False

    return core(frozenset(players), frozenset())


def shannon_capacity(distance, power, beta, exponent, noise, bandwidth):
    gain = beta / distance ** exponent
    return bandwidth * np.log2(1 + power * gain / noise)
