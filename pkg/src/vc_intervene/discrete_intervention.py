"""Conditional vs. interventional context distributions from label statistics.

Every quantity derives from one triple tensor ``C[x, y, z]`` counting events
(image, ordered distinct pair (x, y), third present category z). Because the
conditional, the context posterior and the prior all come from the same
tensor, ``sum_z P(y|x,z) P(z|x) == P(y|x)`` holds to rounding.

For a centre category x the context z can never be x itself, so the prior
used in the adjustment for row x is P(z) renormalised over z != x.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import RowUnsupported, SetTooSmall

_DISTINCT_MASKS: dict[int, np.ndarray] = {}


def _distinct_mask(k):
    mask = _DISTINCT_MASKS.get(k)
    if mask is None:
        i, j, l = np.indices((k, k, k))
        mask = ((i != j) & (i != l) & (j != l)).astype(np.int64)
        _DISTINCT_MASKS[k] = mask
    return mask


@dataclass(frozen=True)
class CoocCounts:
    triples: np.ndarray  # (N, N, N) int64

    def __post_init__(self):
        t = np.asarray(self.triples)
        if t.ndim != 3 or not (t.shape[0] == t.shape[1] == t.shape[2]):
            raise ValueError(f"triple tensor must be N x N x N, got {t.shape}")
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError("triple counts must be integers")
        if (t < 0).any():
            raise ValueError("negative triple count")
        n = t.shape[0]
        if n >= 1:
            off = (1 - _distinct_mask(n)).astype(bool)
            if t[off].any():
                raise ValueError("non-zero count on a triple with repeated categories")
        t = t.astype(np.int64, copy=True)
        t.flags.writeable = False
        object.__setattr__(self, "triples", t)

    @property
    def n_categories(self) -> int:
        return self.triples.shape[0]

    @property
    def total(self) -> int:
        return int(self.triples.sum())

    def pair_counts(self) -> np.ndarray:
        """C(x, y) = sum_z C[x, y, z]."""
        return self.triples.sum(axis=2)

    def centre_context_counts(self) -> np.ndarray:
        """C(x, z) = sum_y C[x, y, z]."""
        return self.triples.sum(axis=1)

    def centre_counts(self) -> np.ndarray:
        return self.triples.sum(axis=(1, 2))

    def context_prior(self) -> np.ndarray:
        """P(z): share of all events whose context is z."""
        total = self.total
        if total == 0:
            return np.zeros(self.n_categories)
        return self.triples.sum(axis=(0, 1)) / total

    def __add__(self, other: "CoocCounts") -> "CoocCounts":
        if other.n_categories != self.n_categories:
            raise ValueError("cannot merge counts over different category sets")
        return CoocCounts(self.triples + other.triples)


def _count_chunk(sets, n):
    c = np.zeros((n, n, n), dtype=np.int64)
    for s in sets:
        idx = np.fromiter(sorted(s), dtype=np.intp, count=len(s))
        c[np.ix_(idx, idx, idx)] += _distinct_mask(len(idx))
    return c


def count_triples(presence, n_categories: int, workers: int | None = 1) -> CoocCounts:
    """Count (x, y, z) events over presence sets.

    ``presence`` holds sets of dense category indices (``(image_id, set)``
    tuples from :func:`presence_sets` are accepted too). Each set contributes
    one count to every ordered triple of distinct members. ``workers > 1``
    partitions the images and merges the integer partial counts, which is
    exact and order-independent.
    """
    sets = [s[1] if isinstance(s, tuple) else s for s in presence]
    for i, s in enumerate(sets):
        if len(s) < 3:
            raise SetTooSmall(f"presence set #{i} has {len(s)} categories; need >= 3")
        if min(s) < 0 or max(s) >= n_categories:
            raise ValueError(f"presence set #{i} has a category outside 0..{n_categories - 1}")
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(sets) < 2 * workers:
        return CoocCounts(_count_chunk(sets, n_categories))
    chunks = [sets[i::workers] for i in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda ch: _count_chunk(ch, n_categories), chunks))
    return CoocCounts(sum(parts[1:], parts[0]))


def default_workers() -> int:
    raw = os.environ.get("VC_INTERVENE_THREADS")
    if raw:
        return max(1, int(raw))
    return 1


@dataclass(frozen=True)
class ProbTable:
    values: np.ndarray  # (N, N): rows X, columns Y
    kind: str  # "conditional" | "interventional"
    support: np.ndarray  # (N,) bool, rows with C(x) > 0
    skipped_mass: np.ndarray  # (N,) prior mass dropped from the do-sum

    @property
    def n_categories(self):
        return self.values.shape[0]


def conditional(counts: CoocCounts) -> ProbTable:
    """P(y|x) = C(x, y) / C(x); unsupported rows are zero and flagged."""
    cxy = counts.pair_counts().astype(float)
    cx = cxy.sum(axis=1)
    support = cx > 0
    values = np.zeros_like(cxy)
    values[support] = cxy[support] / cx[support, None]
    return ProbTable(values, "conditional", support, np.zeros(counts.n_categories))


def context_posterior(counts: CoocCounts) -> np.ndarray:
    """P(z|x) = C(x, z) / C(x), zero on unsupported rows."""
    cxz = counts.centre_context_counts().astype(float)
    cx = cxz.sum(axis=1)
    out = np.zeros_like(cxz)
    ok = cx > 0
    out[ok] = cxz[ok] / cx[ok, None]
    return out


def outcome_given_context(counts: CoocCounts, alpha: float = 0.0) -> np.ndarray:
    """P(y|x,z) indexed ``[x, y, z]``; cells with C(x, z) = 0 stay zero.

    With ``alpha > 0`` each admissible y (y not in {x, z}) receives ``alpha``
    pseudo-counts.
    """
    c = counts.triples.astype(float)
    n = counts.n_categories
    if alpha > 0:
        c = c + alpha * _distinct_mask(n)
    cxz = c.sum(axis=1)  # (x, z)
    out = np.zeros_like(c)
    np.divide(c, cxz[:, None, :], out=out, where=cxz[:, None, :] > 0)
    return out


def admissible_prior(counts: CoocCounts) -> np.ndarray:
    """Row x holds P(z) renormalised over z != x, indexed ``[x, z]``."""
    prior = counts.context_prior()
    n = counts.n_categories
    rows = np.tile(prior, (n, 1))
    np.fill_diagonal(rows, 0.0)
    mass = rows.sum(axis=1, keepdims=True)
    np.divide(rows, mass, out=rows, where=mass > 0)
    return rows


def intervention(counts: CoocCounts, alpha: float = 0.0) -> ProbTable:
    """P(y|do(x)) = sum_z P(y|x,z) P(z), skipping z with C(x, z) = 0.

    The prior mass of skipped contexts is reported per row rather than
    smoothed away (unless ``alpha`` pseudo-counts make every cell defined).
    """
    p_y_xz = outcome_given_context(counts, alpha)
    prior = admissible_prior(counts)
    n = counts.n_categories
    cxz = counts.centre_context_counts()
    if alpha > 0:
        defined = ~np.eye(n, dtype=bool)
    else:
        defined = cxz > 0
    weights = np.where(defined, prior, 0.0)
    values = np.einsum("xyz,xz->xy", p_y_xz, weights)
    support = counts.centre_counts() > 0
    skipped = np.where(support, (prior * ~defined).sum(axis=1), 0.0)
    values[~support] = 0.0
    return ProbTable(values, "interventional", support, skipped)


def total_probability_residual(counts: CoocCounts) -> float:
    """max |sum_z P(y|x,z) P(z|x) - P(y|x)| over supported rows."""
    cond = conditional(counts)
    recon = np.einsum("xyz,xz->xy", outcome_given_context(counts), context_posterior(counts))
    if not cond.support.any():
        return 0.0
    return float(np.abs(recon - cond.values)[cond.support].max())


@dataclass(frozen=True)
class DeltaRow:
    x: int
    y: int
    p_cond: float
    p_do: float
    delta: float
    skipped_mass: float


def delta_report(cond: ProbTable, intv: ProbTable, top_k: int | None = 20) -> list[DeltaRow]:
    """Pairs ranked by |P(y|do(x)) - P(y|x)|, ties (to 1e-12) by (x, y)."""
    if cond.values.shape != intv.values.shape:
        raise ValueError("tables differ in shape")
    if not np.array_equal(cond.support, intv.support):
        raise ValueError("tables differ in support")
    rows = []
    n = cond.n_categories
    for x in range(n):
        if not cond.support[x]:
            continue
        for y in range(n):
            if y == x:
                continue
            pc = float(cond.values[x, y])
            pd = float(intv.values[x, y])
            rows.append(DeltaRow(x, y, pc, pd, pd - pc, float(intv.skipped_mass[x])))
    # rounding keeps float noise from breaking exact ties out of index order
    rows.sort(key=lambda r: (-round(abs(r.delta), 12), r.x, r.y))
    if top_k is not None:
        rows = rows[:top_k]
    return rows


def prior_gap_report(counts: CoocCounts, x: int) -> list[tuple[int, float, float]]:
    """(z, P(z), P(z|x)) sorted by P(z|x) - P(z), largest first.

    P(z) here is the renormalised prior used in the adjustment for row x.
    """
    if counts.centre_counts()[x] == 0:
        raise RowUnsupported(f"category {x} never occurs as a centre")
    prior = admissible_prior(counts)[x]
    post = context_posterior(counts)[x]
    rows = [(z, float(prior[z]), float(post[z]))
            for z in range(counts.n_categories) if z != x and (prior[z] > 0 or post[z] > 0)]
    rows.sort(key=lambda r: (-(r[2] - r[1]), r[0]))
    return rows


def _fmt(v):
    return f"{v:.6g}"


def delta_csv(rows, names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x_name", "y_name", "p_cond", "p_do", "delta", "skipped_mass"])
    for r in rows:
        w.writerow([names[r.x], names[r.y], _fmt(r.p_cond), _fmt(r.p_do), _fmt(r.delta), _fmt(r.skipped_mass)])
    return buf.getvalue()


def table_csv(table: ProbTable, names) -> str:
    """Matrix form: one row per centre category, unsupported rows left blank."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x_name", *names])
    for x, name in enumerate(names):
        if table.support[x]:
            w.writerow([name, *(_fmt(v) for v in table.values[x])])
        else:
            w.writerow([name, *([""] * len(names))])
    return buf.getvalue()


def prior_gap_csv(rows, names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["z_name", "p_z", "p_z_given_x", "gap"])
    for z, pz, pzx in rows:
        w.writerow([names[z], _fmt(pz), _fmt(pzx), _fmt(pzx - pz)])
    return buf.getvalue()


# --- presence-level (binary) backdoor estimate --------------------------------
#
# The triple-event tables above give context *distributions*. Checking against
# a structural causal model needs the binary quantity P(y present | do(x
# present)); the adjustment there stratifies on the joint presence pattern of a
# chosen label set (typically the observable proxies of hidden confounders).

def presence_conditional(presence: np.ndarray, x: int, y: int) -> float:
    presence = np.asarray(presence, dtype=bool)
    has_x = presence[:, x]
    if not has_x.any():
        return float("nan")
    return float(presence[has_x, y].mean())


def presence_backdoor(presence: np.ndarray, x: int, y: int, adjust) -> tuple[float, float]:
    """sum_s P(y=1 | x=1, S=s) P(S=s) over joint patterns s of ``adjust``.

    Returns ``(estimate, skipped_mass)``; strata never observed with x
    present are skipped and their prior mass reported.
    """
    presence = np.asarray(presence, dtype=bool)
    adjust = [a for a in adjust if a != x]
    m = presence.shape[0]
    if m == 0:
        return float("nan"), 1.0
    if adjust:
        weights = 1 << np.arange(len(adjust))
        stratum = presence[:, adjust].astype(np.int64) @ weights
    else:
        stratum = np.zeros(m, dtype=np.int64)
    n_strata = 1 << len(adjust)
    prior = np.bincount(stratum, minlength=n_strata) / m
    has_x = presence[:, x]
    n_x = np.bincount(stratum[has_x], minlength=n_strata)
    n_xy = np.bincount(stratum[has_x & presence[:, y]], minlength=n_strata)
    ok = n_x > 0
    est = float((n_xy[ok] / n_x[ok] * prior[ok]).sum())
    return est, float(prior[~ok].sum())


def presence_tables(presence: np.ndarray, adjust, rows=None):
    """Conditional and backdoor-adjusted presence matrices ``[x, y]``.

    Diagonal entries are 1 by definition; rows not listed in ``rows`` are NaN.
    """
    presence = np.asarray(presence, dtype=bool)
    n = presence.shape[1]
    rows = range(n) if rows is None else rows
    cond = np.full((n, n), np.nan)
    do = np.full((n, n), np.nan)
    for x in rows:
        for y in range(n):
            cond[x, y] = presence_conditional(presence, x, y)
            do[x, y] = presence_backdoor(presence, x, y, adjust)[0]
    return cond, do
