"""Slow, exact reference computations used as test oracles."""
from fractions import Fraction
from itertools import permutations


def triple_events(sets):
    """Every (x, y, z) event, by brute-force enumeration of ordered triples."""
    events = {}
    for s in sets:
        for x, y, z in permutations(sorted(s), 3):
            events[x, y, z] = events.get((x, y, z), 0) + 1
    return events


def exact_tables(sets, n):
    """(cond, do, skipped) as nested lists of Fractions; None for unsupported rows."""
    ev = triple_events(sets)
    total = sum(ev.values())
    c_z = [sum(v for (_, _, z), v in ev.items() if z == k) for k in range(n)]
    cond, do, skipped = [], [], []
    for x in range(n):
        c_x = sum(v for (a, _, _), v in ev.items() if a == x)
        if c_x == 0:
            cond.append(None)
            do.append(None)
            skipped.append(None)
            continue
        cond.append([Fraction(sum(v for (a, b, _), v in ev.items() if a == x and b == y), c_x)
                     for y in range(n)])
        mass = sum(c_z[z] for z in range(n) if z != x)
        row = [Fraction(0)] * n
        skip = Fraction(0)
        for z in range(n):
            if z == x or c_z[z] == 0:
                continue
            prior = Fraction(c_z[z], mass)
            c_xz = sum(v for (a, _, c), v in ev.items() if a == x and c == z)
            if c_xz == 0:
                skip += prior
                continue
            for y in range(n):
                row[y] += Fraction(ev.get((x, y, z), 0), c_xz) * prior
        do.append(row)
        skipped.append(skip)
    return cond, do, skipped


def sorted_deltas(cond, do, n):
    rows = []
    for x in range(n):
        if cond[x] is None:
            continue
        for y in range(n):
            if y != x:
                rows.append((x, y, do[x][y] - cond[x][y]))
    rows.sort(key=lambda r: (-abs(r[2]), r[0], r[1]))
    return rows
