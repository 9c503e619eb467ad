"""Discrete structural causal model over object-presence labels.

Hidden binary confounders are drawn first, then each category's presence is
drawn in topological order from a base probability indexed by its confounder
parents' assignment, shifted on the logit scale by direct effects from
categories already present. Worlds stay small enough (N <= 12, H <= 4) for
exact enumeration of the joint, which serves as ground truth for both the
observational and the graph-surgery interventional distribution.
"""
from __future__ import annotations

import graphlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import InvalidWorld, UnreachableCondition

MAX_ENUM_BITS = 20


@dataclass
class ScmWorld:
    n_categories: int
    n_confounders: int
    confounder_priors: np.ndarray  # (H,)
    parent_map: list[list[int]]  # per category: confounder parents
    presence_probs: list[np.ndarray]  # per category: (2**len(parents),) indexed by parent bits
    direct_effects: np.ndarray  # (N, N) logit boost to column when row present
    names: list[str] = field(default_factory=list)
    proxies: list[int] = field(default_factory=list)  # observable stand-ins for confounders

    def __post_init__(self):
        n, h = self.n_categories, self.n_confounders
        self.confounder_priors = np.asarray(self.confounder_priors, dtype=float).reshape(-1)
        self.direct_effects = np.zeros((n, n)) if self.direct_effects is None else np.asarray(self.direct_effects, dtype=float)
        self.presence_probs = [np.asarray(p, dtype=float).reshape(-1) for p in self.presence_probs]
        if not self.names:
            self.names = [f"c{i}" for i in range(n)]
        if n < 1 or h < 0:
            raise InvalidWorld("need at least one category and a non-negative confounder count")
        if self.confounder_priors.shape != (h,):
            raise InvalidWorld(f"expected {h} confounder priors")
        if ((self.confounder_priors < 0) | (self.confounder_priors > 1)).any():
            raise InvalidWorld("confounder priors must lie in [0, 1]")
        if len(self.parent_map) != n or len(self.presence_probs) != n:
            raise InvalidWorld("parent_map and presence_probs need one entry per category")
        for c, (parents, probs) in enumerate(zip(self.parent_map, self.presence_probs)):
            if any(p < 0 or p >= h for p in parents) or len(set(parents)) != len(parents):
                raise InvalidWorld(f"category {c} has invalid confounder parents {parents}")
            if probs.shape != (1 << len(parents),):
                raise InvalidWorld(f"category {c} needs {1 << len(parents)} presence probabilities")
            if ((probs < 0) | (probs > 1)).any():
                raise InvalidWorld(f"category {c} has a presence probability outside [0, 1]")
        if self.direct_effects.shape != (n, n):
            raise InvalidWorld("direct_effects must be N x N")
        if np.diag(self.direct_effects).any():
            raise InvalidWorld("a category cannot boost itself")
        if not np.isfinite(self.direct_effects).all():
            raise InvalidWorld("direct effects must be finite")
        if len(self.names) != n or len(set(self.names)) != n:
            raise InvalidWorld("names must be unique, one per category")
        if any(p < 0 or p >= n for p in self.proxies):
            raise InvalidWorld("proxy index out of range")
        self.order = self._topological_order()

    def _topological_order(self):
        sorter = graphlib.TopologicalSorter({c: [] for c in range(self.n_categories)})
        for src, dst in zip(*np.nonzero(self.direct_effects)):
            sorter.add(int(dst), int(src))
        try:
            return list(sorter.static_order())
        except graphlib.CycleError as exc:
            raise InvalidWorld(f"direct effects contain a cycle: {exc.args[1]}") from None

    def category_parents(self, c: int) -> list[int]:
        return [int(s) for s in np.nonzero(self.direct_effects[:, c])[0]]

    def adjustment_set(self, x: int) -> list[int]:
        """Observed labels that block every backdoor path into ``x``.

        The proxies stand in for the hidden confounders; adding x's direct
        category parents completes the parents-of-x adjustment set.
        """
        return sorted((set(self.proxies) | set(self.category_parents(x))) - {x})

    def presence_prob(self, c, confounders, presence):
        """P(category c present) for a batch of (confounder, presence) rows."""
        parents = self.parent_map[c]
        if parents:
            bits = confounders[:, parents].astype(np.int64) @ (1 << np.arange(len(parents)))
        else:
            bits = np.zeros(confounders.shape[0], dtype=np.int64)
        base = self.presence_probs[c][bits]
        boost = presence.astype(float) @ self.direct_effects[:, c]
        # 0 and 1 are deterministic links; logit shifts leave them untouched
        inner = (base > 0) & (base < 1)
        out = base.copy()
        b = base[inner]
        out[inner] = 1.0 / (1.0 + np.exp(-(np.log(b) - np.log1p(-b) + boost[inner])))
        return out

    # -- serialisation -------------------------------------------------------
    def to_dict(self):
        return {
            "n_categories": self.n_categories,
            "n_confounders": self.n_confounders,
            "names": list(self.names),
            "confounder_priors": self.confounder_priors.tolist(),
            "parent_map": [list(p) for p in self.parent_map],
            "presence_probs": [p.tolist() for p in self.presence_probs],
            "direct_effects": self.direct_effects.tolist(),
            "proxies": list(self.proxies),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            n = int(doc["n_categories"])
            return cls(
                n_categories=n,
                n_confounders=int(doc["n_confounders"]),
                confounder_priors=doc["confounder_priors"],
                parent_map=[[int(p) for p in ps] for ps in doc["parent_map"]],
                presence_probs=doc["presence_probs"],
                direct_effects=doc.get("direct_effects"),
                names=list(doc.get("names", [])),
                proxies=[int(p) for p in doc.get("proxies", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidWorld(f"bad world description: {exc!r}") from exc


def load_world(path) -> ScmWorld:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidWorld(f"cannot read world file {path}: {exc}") from exc
    return ScmWorld.from_dict(doc)


def save_world(world: ScmWorld, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world.to_dict(), fh, indent=2)
        fh.write("\n")


def fixture_world(name: str = "reference_world") -> ScmWorld:
    """Load one of the worlds shipped in ``vc_intervene/fixtures``."""
    text = resources.files("vc_intervene").joinpath("fixtures", f"{name}.json").read_text(encoding="utf-8")
    return ScmWorld.from_dict(json.loads(text))


@dataclass
class Scenes:
    """A batch of sampled scenes: presence bits plus the hidden confounders."""

    presence: np.ndarray  # (m, N) bool
    confounders: np.ndarray  # (m, H) bool

    def __len__(self):
        return self.presence.shape[0]

    def to_tsv(self, names) -> str:
        lines = []
        for i, row in enumerate(self.presence):
            for c in np.nonzero(row)[0]:
                lines.append(f"{i}\t{names[c]}")
        return "\n".join(lines) + ("\n" if lines else "")


def sample_scenes(world: ScmWorld, m: int, seed: int) -> Scenes:
    """Ancestral sampling of ``m`` i.i.d. scenes, deterministic in ``seed``."""
    if m < 0:
        raise ValueError("m must be non-negative")
    rng = np.random.default_rng(seed)
    n, h = world.n_categories, world.n_confounders
    conf = rng.random((m, h)) < world.confounder_priors
    presence = np.zeros((m, n), dtype=bool)
    draws = rng.random((m, n))
    for c in world.order:
        p = world.presence_prob(c, conf, presence)
        presence[:, c] = draws[:, c] < p
    return Scenes(presence, conf)


def _all_bits(k):
    return ((np.arange(1 << k)[:, None] >> np.arange(k)) & 1).astype(bool)


def joint_table(world: ScmWorld, clamp: dict[int, bool] | None = None):
    """Exact joint over (confounders, categories).

    Returns ``(presence_bits, weights)``, one row per category assignment
    with its probability summed over confounders. ``clamp`` performs graph
    surgery: each clamped category loses its incoming edges and is fixed.
    """
    n, h = world.n_categories, world.n_confounders
    if n + h > MAX_ENUM_BITS:
        raise InvalidWorld(f"world too large to enumerate ({n} + {h} bits)")
    clamp = clamp or {}
    cats = _all_bits(n)
    weights = np.zeros(cats.shape[0])
    for u in _all_bits(h):
        pu = float(np.prod(np.where(u, world.confounder_priors, 1 - world.confounder_priors)))
        if pu == 0.0:
            continue
        conf = np.broadcast_to(u, (cats.shape[0], h))
        lik = np.full(cats.shape[0], pu)
        for c in range(n):
            if c in clamp:
                lik *= cats[:, c] == clamp[c]
                continue
            p = world.presence_prob(c, conf, cats)
            lik *= np.where(cats[:, c], p, 1 - p)
        weights += lik
    return cats, weights


def oracle_conditional(world: ScmWorld, x: int, y: int) -> float:
    """Exact P(y present | x present)."""
    cats, w = joint_table(world)
    px = w[cats[:, x]].sum()
    if px <= 0:
        raise UnreachableCondition(f"category {x} is never present")
    return float(w[cats[:, x] & cats[:, y]].sum() / px)


def oracle_intervention(world: ScmWorld, x: int, y: int) -> float:
    """Exact P(y present | do(x present)) under the mutilated model."""
    cats, w = joint_table(world, clamp={x: True})
    return float(w[cats[:, y]].sum())


def oracle_marginal(world: ScmWorld, y: int) -> float:
    cats, w = joint_table(world)
    return float(w[cats[:, y]].sum())


def oracle_tables(world: ScmWorld):
    """Full ``[x, y]`` matrices of exact conditional and interventional presence.

    Rows for categories that are never present are NaN in the conditional.
    """
    n = world.n_categories
    cats, w = joint_table(world)
    cond = np.full((n, n), np.nan)
    do = np.zeros((n, n))
    for x in range(n):
        px = w[cats[:, x]].sum()
        if px > 0:
            cond[x] = (w[:, None] * (cats & cats[:, [x]])).sum(axis=0) / px
        cats_x, w_x = joint_table(world, clamp={x: True})
        do[x] = (w_x[:, None] * cats_x).sum(axis=0)
    return cond, do


def deconfounded_world(world: ScmWorld) -> ScmWorld:
    """Same marginals, but every category drawn independently of everything.

    Confounders keep their priors (they still shape synthetic features) while
    categories lose all incoming edges, so no label carries information about
    the hidden scene.
    """
    probs = [[oracle_marginal(world, c)] for c in range(world.n_categories)]
    return ScmWorld(world.n_categories, world.n_confounders, world.confounder_priors.copy(),
                    [[] for _ in range(world.n_categories)], probs,
                    np.zeros((world.n_categories, world.n_categories)), list(world.names), [])
