"""Context-prediction head with an NWGM-approximated intervention.

For a centre region ``x`` and a context region ``y`` the head predicts the
context's class from

    logits = W1 x + W2 E_z[g_y(z)],    E_z[g_y(z)] = sum_i a_i P(z_i) z_i,
    a = softmax((W3 y)^T (W4 Z^T) / sqrt(sigma)),

i.e. the expectation over confounders is moved inside the softmax. A
self-predictor ``softmax(Ws x)`` classifies the centre itself. The loss per
centre is ``CE_self + mean_k CE_context``. Everything is float64 numpy with
hand-derived gradients; :func:`gradient_check` compares them against central
finite differences.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal

import numpy as np

from .confounder_dict import ConfounderDictionary, build_context
from .errors import DivergedLoss, NonFiniteInput
from .feature_store import RegionFeatureSet, read_fmat, write_fmat
from .seeding import fan_out

BLOCKS = ("W1", "W2", "W3", "W4", "Ws")


# -- parameters ---------------------------------------------------------------

@dataclass
class HeadParams:
    W1: np.ndarray  # (N, d) direct term
    W2: np.ndarray  # (N, d) confounder term
    W3: np.ndarray  # (sigma, d) query map
    W4: np.ndarray  # (sigma, d) key map
    Ws: np.ndarray  # (N, d) self predictor
    grads: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in BLOCKS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n, d = self.W1.shape
        if self.W2.shape != (n, d) or self.Ws.shape != (n, d):
            raise ValueError("W1, W2 and Ws must share shape (N, d)")
        if self.W3.shape[1] != d or self.W4.shape != self.W3.shape:
            raise ValueError("W3 and W4 must share shape (sigma, d)")
        if not self.grads:
            self.zero_grad()

    @classmethod
    def init(cls, n: int, d: int, sigma: int, seed: int) -> "HeadParams":
        """Uniform(-1/sqrt(d), 1/sqrt(d)) entries, one generator per block."""
        bound = 1.0 / math.sqrt(d)
        shapes = {"W1": (n, d), "W2": (n, d), "W3": (sigma, d), "W4": (sigma, d), "Ws": (n, d)}
        blocks = {}
        for name in BLOCKS:
            rng = np.random.default_rng(fan_out(seed, "init/" + name))
            blocks[name] = rng.uniform(-bound, bound, shapes[name])
        return cls(**blocks)

    @property
    def n_categories(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def sigma(self) -> int:
        return self.W3.shape[0]

    def zero_grad(self):
        self.grads = {name: np.zeros_like(getattr(self, name)) for name in BLOCKS}

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.blocks().items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks().values())


@dataclass(frozen=True)
class HeadOptions:
    """Switches for the ablations.

    ``intervention=False`` drops the confounder term (plain correlation
    objective). ``expectation_only`` replaces attention by the prior alone.
    ``detach_attention`` treats the attention weights as constants in the
    backward pass. ``renormalize`` divides the expected confounder by its
    mass ``sum_i a_i P(z_i)``.
    """

    intervention: bool = True
    expectation_only: bool = False
    detach_attention: bool = False
    renormalize: bool = False

    @classmethod
    def for_dictionary(cls, dct: ConfounderDictionary, **kw) -> "HeadOptions":
        return cls(expectation_only=dct.variant == "expectation_only", **kw)


# -- batches ------------------------------------------------------------------

@dataclass
class PairBatch:
    """Centres and their contexts, flattened into arrays.

    ``owner[p]`` is the centre row that context ``p`` belongs to. Optional
    ``context_Z``/``context_prior`` give every context its own dictionary
    (per-image context variant).
    """

    X: np.ndarray  # (B, d)
    x_class: np.ndarray  # (B,)
    Y: np.ndarray  # (P, d)
    y_class: np.ndarray  # (P,)
    owner: np.ndarray  # (P,)
    image_ids: np.ndarray | None = None  # (B,)
    context_Z: np.ndarray | None = None  # (P, M, d)
    context_prior: np.ndarray | None = None  # (P, M)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.x_class), -1)
        self.x_class = np.asarray(self.x_class, dtype=np.int64)
        self.y_class = np.asarray(self.y_class, dtype=np.int64)
        self.Y = np.asarray(self.Y, dtype=np.float64).reshape(len(self.y_class), self.X.shape[1])
        self.owner = np.asarray(self.owner, dtype=np.int64)
        if self.owner.shape != self.y_class.shape:
            raise ValueError("owner needs one entry per context")
        counts = np.bincount(self.owner, minlength=len(self.x_class)) if len(self.owner) else np.zeros(len(self.x_class), int)
        if len(counts) != len(self.x_class) or (counts < 1).any():
            raise ValueError("every centre needs at least one context")

    @classmethod
    def from_centers(cls, centers) -> "PairBatch":
        """Build from ``[(x, x_class, [(y, y_class), ...]), ...]``."""
        X, xc, Y, yc, owner = [], [], [], [], []
        for b, (x, c, contexts) in enumerate(centers):
            X.append(np.asarray(x, dtype=float))
            xc.append(c)
            for y, c_y in contexts:
                Y.append(np.asarray(y, dtype=float))
                yc.append(c_y)
                owner.append(b)
        d = len(X[0]) if X else 0
        return cls(np.reshape(X, (len(X), d)), xc, np.reshape(Y, (len(Y), d)), yc, owner)

    @property
    def n_centers(self) -> int:
        return len(self.x_class)

    @property
    def n_pairs(self) -> int:
        return len(self.y_class)

    def contexts_per_center(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.n_centers)

    def centers(self):
        for b in range(self.n_centers):
            sel = np.nonzero(self.owner == b)[0]
            yield self.X[b], int(self.x_class[b]), [(self.Y[p], int(self.y_class[p])) for p in sel]

    def select_pairs(self, keep) -> "PairBatch":
        """Keep the contexts flagged in ``keep``; centres left with none are dropped."""
        keep = np.asarray(keep, dtype=bool)
        alive = np.bincount(self.owner[keep], minlength=self.n_centers) > 0
        remap = np.cumsum(alive) - 1
        return PairBatch(
            self.X[alive], self.x_class[alive], self.Y[keep], self.y_class[keep], remap[self.owner[keep]],
            None if self.image_ids is None else self.image_ids[alive],
            None if self.context_Z is None else self.context_Z[keep],
            None if self.context_prior is None else self.context_prior[keep],
        )


# -- forward pieces -----------------------------------------------------------

def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(logits):
    m = logits.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]


def _check_finite(*arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteInput("input contains NaN or infinity")


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits)
    return _softmax(logits)


def _dictionary(dct, batch=None):
    if batch is not None and batch.context_Z is not None:
        return batch.context_Z, batch.context_prior
    return dct.Z, dct.prior


def _attention(Y, Z, params):
    """Attention logits and weights for context rows ``Y`` (P, d)."""
    Q = Y @ params.W3.T  # (P, sigma)
    scale = math.sqrt(params.sigma)
    if Z.ndim == 2:
        K = Z @ params.W4.T  # (M, sigma)
        e = Q @ K.T / scale
    else:
        K = np.einsum("pmd,sd->pms", Z, params.W4)
        e = np.einsum("ps,pms->pm", Q, K) / scale
    return Q, K, _softmax(e)


def _expected(w, Z):
    if Z.ndim == 2:
        return w @ Z
    return np.einsum("pm,pmd->pd", w, Z)


def attention_weights(y, dct: ConfounderDictionary, params: HeadParams) -> np.ndarray:
    """softmax((W3 y)^T (W4 Z^T) / sqrt(sigma)) over dictionary entries."""
    y = np.asarray(y, dtype=np.float64)
    _check_finite(y, params.W3, params.W4, dct.Z)
    return _attention(y[None, :], dct.Z, params)[2][0]


def expected_confounder(a, dct: ConfounderDictionary, expectation_only: bool = False):
    """``(sum_i a_i P(z_i) z_i, sum_i a_i P(z_i))``.

    With ``expectation_only`` the attention is ignored: ``sum_i P(z_i) z_i``.
    """
    weights = dct.prior if expectation_only else np.asarray(a, dtype=np.float64) * dct.prior
    return weights @ dct.Z, float(weights.sum())


def context_logits(x, ec, params: HeadParams) -> np.ndarray:
    return params.W1 @ np.asarray(x, dtype=np.float64) + params.W2 @ np.asarray(ec, dtype=np.float64)


def context_prob(x, y, dct: ConfounderDictionary, params: HeadParams,
                 options: HeadOptions | None = None) -> np.ndarray:
    """P(Y | do(X)) approximated as softmax(E_z[f_y(x, z)])."""
    options = options or HeadOptions.for_dictionary(dct)
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, np.asarray(y, dtype=np.float64), params.W1, params.W2)
    if not options.intervention:
        return _softmax(params.W1 @ x)
    a = attention_weights(y, dct, params)
    ec, mass = expected_confounder(a, dct, options.expectation_only)
    if options.renormalize and mass > 0:
        ec = ec / mass
    return _softmax(context_logits(x, ec, params))


def exact_expectation(x, y, dct: ConfounderDictionary, params: HeadParams) -> np.ndarray:
    """E_z[softmax(W1 x + W2 z)] with z drawn from the attention-weighted prior.

    This is the quantity the NWGM step approximates; for a point-mass
    dictionary the two coincide.
    """
    a = attention_weights(y, dct, params)
    w = a * dct.prior
    w = w / w.sum()
    direct = params.W1 @ np.asarray(x, dtype=np.float64)
    out = np.zeros(params.n_categories)
    for wi, z in zip(w, dct.Z):
        out = out + wi * _softmax(direct + params.W2 @ z)
    return out


def self_prob(x, params: HeadParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, params.Ws)
    return _softmax(params.Ws @ x)


# -- loss and gradients -------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    self_term: float
    context_term: float
    mass: float  # mean sum_i a_i P(z_i) over contexts


def _forward(batch: PairBatch, dct, params, options):
    cache = {}
    B = batch.n_centers
    k = batch.contexts_per_center().astype(float)
    pair_w = 1.0 / (B * k[batch.owner])  # weight of each context CE in the mean loss

    s = batch.X @ params.Ws.T
    ce_self = _logsumexp(s) - s[np.arange(B), batch.x_class]

    f = batch.X[batch.owner] @ params.W1.T
    mass = np.ones(batch.n_pairs)
    if options.intervention:
        Z, prior = _dictionary(dct, batch)
        if options.expectation_only:
            a = None
            w = np.broadcast_to(prior, (batch.n_pairs, prior.shape[-1]))
            Q = K = None
        else:
            Q, K, a = _attention(batch.Y, Z, params)
            w = a * prior
        mass = w.sum(axis=1)
        ec_raw = _expected(w, Z)
        if options.renormalize:
            safe = np.where(mass > 0, mass, 1.0)
            ec = ec_raw / safe[:, None]
        else:
            ec = ec_raw
        f = f + ec @ params.W2.T
        cache.update(Z=Z, prior=prior, Q=Q, K=K, a=a, w=w, ec=ec, mass=mass)
    ce_cxt = _logsumexp(f) - f[np.arange(batch.n_pairs), batch.y_class]

    self_term = float(ce_self.mean()) if B else 0.0
    cxt_term = float((pair_w * ce_cxt).sum())
    cache.update(s=s, f=f, pair_w=pair_w)
    breakdown = LossBreakdown(self_term + cxt_term, self_term, cxt_term,
                              float(mass.mean()) if batch.n_pairs else 0.0)
    return breakdown, cache


def loss(batch: PairBatch, dct: ConfounderDictionary, params: HeadParams,
         options: HeadOptions | None = None) -> LossBreakdown:
    """Mean over centres of CE_self + (1/K) sum_k CE_context."""
    options = options or HeadOptions.for_dictionary(dct)
    return _forward(batch, dct, params, options)[0]


def backward(batch: PairBatch, dct: ConfounderDictionary, params: HeadParams,
             options: HeadOptions | None = None) -> LossBreakdown:
    """Forward pass, then exact gradients of the mean loss into ``params.grads``.

    Dictionary rows are constants and receive no gradient.
    """
    options = options or HeadOptions.for_dictionary(dct)
    out, c = _forward(batch, dct, params, options)
    B = batch.n_centers
    grads = {name: np.zeros_like(getattr(params, name)) for name in BLOCKS}

    ds = _softmax(c["s"])
    ds[np.arange(B), batch.x_class] -= 1.0
    ds /= B
    grads["Ws"] = ds.T @ batch.X

    df = _softmax(c["f"])
    df[np.arange(batch.n_pairs), batch.y_class] -= 1.0
    df *= c["pair_w"][:, None]
    grads["W1"] = df.T @ batch.X[batch.owner]

    if options.intervention:
        ec = c["ec"]
        grads["W2"] = df.T @ ec
        if not (options.expectation_only or options.detach_attention):
            Z, prior, a = c["Z"], c["prior"], c["a"]
            dec = df @ params.W2  # (P, d)
            if Z.ndim == 2:
                dw = dec @ Z.T
            else:
                dw = np.einsum("pd,pmd->pm", dec, Z)
            if options.renormalize:
                mass = np.where(c["mass"] > 0, c["mass"], 1.0)
                dw = (dw - (dec * ec).sum(axis=1, keepdims=True)) / mass[:, None]
            da = dw * prior
            de = a * (da - (a * da).sum(axis=1, keepdims=True)) / math.sqrt(params.sigma)
            Q, K = c["Q"], c["K"]
            if Z.ndim == 2:
                dQ = de @ K
                dK = de.T @ Q  # (M, sigma)
                grads["W4"] = dK.T @ Z
            else:
                dQ = np.einsum("pm,pms->ps", de, K)
                grads["W4"] = np.einsum("pm,ps,pmd->sd", de, Q, Z)
            grads["W3"] = dQ.T @ batch.Y
    params.grads = grads
    return out


def gradient_check(n=7, d=11, sigma=5, k=2, centers=3, seed=0, h=1e-5,
                   options: HeadOptions | None = None) -> dict:
    """Max relative error between analytic and central-difference gradients.

    The error for a block is ``max|g_a - g_n| / max(max|g_a|, max|g_n|)``.
    Weights are drawn at unit scale so the attention is far from uniform.
    """
    rng = np.random.default_rng(fan_out(seed, "gradcheck"))
    params = HeadParams(*(rng.standard_normal(s) for s in [(n, d), (n, d), (sigma, d), (sigma, d), (n, d)]))
    prior = rng.dirichlet(np.ones(n))
    dct = ConfounderDictionary(rng.standard_normal((n, d)), prior)
    batch = PairBatch(rng.standard_normal((centers, d)), rng.integers(0, n, centers),
                      rng.standard_normal((centers * k, d)), rng.integers(0, n, centers * k),
                      np.repeat(np.arange(centers), k))
    options = options or HeadOptions()
    backward(batch, dct, params, options)
    analytic = {name: g.copy() for name, g in params.grads.items()}
    errors = {}
    for name in BLOCKS:
        W = getattr(params, name)
        numeric = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            orig = W[idx]
            W[idx] = orig + h
            up = loss(batch, dct, params, options).total
            W[idx] = orig - h
            down = loss(batch, dct, params, options).total
            W[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.abs(analytic[name]).max(), np.abs(numeric).max())
        diff = np.abs(analytic[name] - numeric).max()
        errors[name] = 0.0 if scale == 0 else float(diff / scale)
    return errors


# -- data ---------------------------------------------------------------------

class PairDataset:
    """Regions grouped by image; every region is a centre, the rest its contexts."""

    def __init__(self, features: RegionFeatureSet, max_contexts: int | None = None, seed: int = 0):
        self.features = features
        self.X = features.features()
        self.cats = features.categories
        image_ids = features.image_ids
        order = np.argsort(image_ids, kind="stable")
        uniq, starts = np.unique(image_ids[order], return_index=True)
        groups = np.split(order, starts[1:]) if len(order) else []
        # single-region images have no context and cannot train the head
        self.images = [(int(i), g) for i, g in zip(uniq, groups) if len(g) >= 2]
        self.max_contexts = max_contexts
        self._cap_rng = np.random.default_rng(fan_out(seed, "context-cap"))

    def __len__(self):
        return len(self.images)

    def n_batches(self, batch_images: int) -> int:
        return -(-len(self.images) // batch_images)

    def batch(self, image_positions) -> PairBatch:
        X, xc, Y, yc, owner, img_of = [], [], [], [], [], []
        b = 0
        for pos in image_positions:
            image_id, rows = self.images[pos]
            for r in rows:
                others = rows[rows != r]
                if self.max_contexts is not None and len(others) > self.max_contexts:
                    others = np.sort(self._cap_rng.choice(others, self.max_contexts, replace=False))
                X.append(r)
                xc.append(self.cats[r])
                img_of.append(image_id)
                Y.extend(others)
                yc.extend(self.cats[others])
                owner.extend([b] * len(others))
                b += 1
        X = np.array(X, dtype=np.intp)
        Y = np.array(Y, dtype=np.intp)
        return PairBatch(self.X[X], np.array(xc), self.X[Y], np.array(yc), np.array(owner),
                         image_ids=np.array(img_of))

    def epoch(self, batch_images: int, rng) -> list:
        perm = rng.permutation(len(self.images))
        return [perm[i:i + batch_images] for i in range(0, len(perm), batch_images)]

    def all_pairs(self) -> PairBatch:
        return self.batch(range(len(self.images)))


def attach_context_dictionaries(batch: PairBatch, dataset: PairDataset, n_categories: int) -> PairBatch:
    """Give each context the dictionary of its own image (context variant)."""
    cache = {}
    for image_id, rows in dataset.images:
        cache[image_id] = rows
    Zs, priors = [], []
    per_image = {}
    for img in np.unique(batch.image_ids):
        rows = cache[int(img)]
        dct = build_context(list(zip(dataset.cats[rows], dataset.X[rows])), n_categories, warn=False)
        per_image[int(img)] = dct
    for p in range(batch.n_pairs):
        dct = per_image[int(batch.image_ids[batch.owner[p]])]
        Zs.append(dct.Z)
        priors.append(dct.prior)
    return replace(batch, context_Z=np.array(Zs), context_prior=np.array(priors))


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    momentum: float = 0.9
    weight_decay: float = 0.0001
    decay_milestones: tuple = (160 / 220, 200 / 220)
    decay_factor: float = 0.1
    total_steps: int | None = None  # default: epochs * batches per epoch
    epochs: int = 1
    batch_images: int = 8
    seed: int = 0
    sigma: int = 64
    log_every: int = 1
    max_contexts: int | None = None
    intervention: bool = True
    detach_attention: bool = False
    renormalize: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        ms = tuple(float(m) for m in self.decay_milestones)
        if any(not 0 < m < 1 for m in ms) or list(ms) != sorted(ms):
            raise ValueError("decay milestones must be ascending fractions in (0, 1)")
        self.decay_milestones = ms

    def milestone_steps(self, total_steps: int) -> list[int]:
        return [int(round(m * total_steps)) for m in self.decay_milestones]

    def lr_at(self, step: int, total_steps: int | None = None) -> float:
        """Step-decayed rate; decimal arithmetic keeps 5e-4 * 0.1 == 5e-5 exact."""
        total = total_steps or self.total_steps
        if not total:
            raise ValueError("total_steps unknown")
        k = sum(step >= m for m in self.milestone_steps(total))
        return float(Decimal(repr(self.learning_rate)) * Decimal(repr(self.decay_factor)) ** k)

    def options(self, dct: ConfounderDictionary) -> HeadOptions:
        return HeadOptions(intervention=self.intervention,
                           expectation_only=dct.variant == "expectation_only",
                           detach_attention=self.detach_attention, renormalize=self.renormalize)

    def to_dict(self):
        return asdict(self)


_CONFIG_TYPES = {f: t for f, t in TrainConfig.__annotations__.items()}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key=value`` lines (``#`` comments) applied over ``base``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = raw
    return apply_overrides(base or TrainConfig(), values)


_ALIASES = {"lr": "learning_rate", "wd": "weight_decay"}


def apply_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    updates = {}
    for key, raw in values.items():
        key = _ALIASES.get(key, key)
        if key not in _CONFIG_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if not isinstance(raw, str):
            updates[key] = raw
        elif key == "decay_milestones":
            updates[key] = tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
        elif raw.lower() in ("none", ""):
            updates[key] = None
        elif isinstance(current, bool):
            updates[key] = raw.lower() in ("1", "true", "yes", "on")
        elif key in ("total_steps", "max_contexts", "epochs", "batch_images", "seed", "sigma", "log_every"):
            updates[key] = int(raw)
        else:
            updates[key] = float(raw)
    return replace(cfg, **updates)


@dataclass
class TrainResult:
    params: HeadParams
    curve: list  # (step, loss_total, loss_self, loss_cxt, lr)
    total_steps: int
    n_pairs_seen: int = 0


def train(dataset, dct: ConfounderDictionary, config: TrainConfig,
          params: HeadParams | None = None, sample_filter=None, allow_context: bool = False,
          on_log=None) -> TrainResult:
    """Momentum SGD over the head parameters.

    ``dataset`` is a :class:`PairDataset` (shuffled every epoch) or a list of
    :class:`PairBatch` cycled in order. ``sample_filter(batch, dct, params)``
    may drop contexts before each step. Weight decay is added to the gradient
    and never to the reported loss. Raises :class:`DivergedLoss` on a
    non-finite loss.
    """
    if dct.variant == "context" and not allow_context:
        raise ValueError("the context dictionary variant needs allow_context=True")
    if isinstance(dataset, PairDataset):
        per_epoch = dataset.n_batches(config.batch_images)
        n_classes = int(dataset.cats.max()) + 1 if len(dataset.cats) else 0
    else:
        dataset = list(dataset)
        per_epoch = len(dataset)
        n_classes = None
    total = config.total_steps or config.epochs * per_epoch
    if params is None:
        if n_classes is None:
            n_classes = int(max(max(b.x_class.max(), b.y_class.max()) for b in dataset)) + 1
        n_classes = max(n_classes, dct.n_entries if dct.variant != "random" else 0)
        params = HeadParams.init(n_classes, dct.dim, config.sigma, config.seed)
    else:
        params = params.copy()
    options = config.options(dct)
    velocity = {name: np.zeros_like(getattr(params, name)) for name in BLOCKS}
    shuffle_rng = np.random.default_rng(fan_out(config.seed, "shuffle"))

    def batches():
        while True:
            if isinstance(dataset, PairDataset):
                for positions in dataset.epoch(config.batch_images, shuffle_rng):
                    yield dataset.batch(positions)
            else:
                if not dataset:
                    return
                yield from dataset

    curve = []
    seen = 0
    stream = batches()
    for step in range(total):
        batch = next(stream)
        if dct.variant == "context":
            batch = attach_context_dictionaries(batch, dataset, params.n_categories)
        if sample_filter is not None:
            batch = sample_filter(batch, dct, params)
            if batch.n_centers == 0:
                continue
        lr = config.lr_at(step, total)
        with np.errstate(over="ignore", invalid="ignore"):
            out = backward(batch, dct, params, options)
        if not math.isfinite(out.total):
            raise DivergedLoss(step, out.total)
        seen += batch.n_pairs
        for name in BLOCKS:
            W = getattr(params, name)
            g = params.grads[name] + config.weight_decay * W
            v = velocity[name]
            v *= config.momentum
            v += g
            W -= lr * v
        if step % config.log_every == 0 or step == total - 1:
            row = (step, out.total, out.self_term, out.context_term, lr)
            curve.append(row)
            if on_log is not None:
                on_log(row)
    if not params.all_finite():
        raise DivergedLoss(total, float("nan"))
    return TrainResult(params, curve, total, seen)


def evaluate(batch: PairBatch, dct: ConfounderDictionary, params: HeadParams,
             options: HeadOptions | None = None) -> dict:
    """Loss plus top-1 accuracy of the self and context predictors."""
    options = options or HeadOptions.for_dictionary(dct)
    out, cache = _forward(batch, dct, params, options)
    self_acc = float((cache["s"].argmax(axis=1) == batch.x_class).mean())
    cxt_acc = float((cache["f"].argmax(axis=1) == batch.y_class).mean())
    return {"loss": out.total, "loss_self": out.self_term, "loss_cxt": out.context_term,
            "self_acc": self_acc, "context_acc": cxt_acc}


def write_loss_csv(curve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_total", "loss_self", "loss_cxt", "lr"])
        for step, total, s, c, lr in curve:
            w.writerow([step, f"{total:.6g}", f"{s:.6g}", f"{c:.6g}", f"{lr:.6g}"])


# -- export -------------------------------------------------------------------

FEATURE_MODES = ("direct", "input", "self_logits")


def extract_features(regions: RegionFeatureSet, params: HeadParams, mode: str = "direct") -> RegionFeatureSet:
    """Per-region commonsense features: ``W1 x`` by default.

    ``input`` passes ``x`` through; ``self_logits`` exports ``Ws x``.
    """
    X = regions.features()
    if mode == "direct":
        out = X @ params.W1.T
    elif mode == "input":
        out = X
    elif mode == "self_logits":
        out = X @ params.Ws.T
    else:
        raise ValueError(f"unknown feature mode {mode!r}")
    return regions.with_matrix(out)


def save_checkpoint(params: HeadParams, directory, manifest: dict | None = None) -> None:
    """One FMAT per weight block plus ``manifest.json``.

    FMAT storage is float32, so a reloaded head matches to single precision.
    """
    os.makedirs(directory, exist_ok=True)
    for name, W in params.blocks().items():
        rows = W.shape[0]
        write_fmat(RegionFeatureSet.from_arrays(W, np.zeros(rows), np.arange(rows), np.zeros(rows)),
                   os.path.join(directory, f"{name}.fmat"))
    doc = {"shapes": {k: list(v.shape) for k, v in params.blocks().items()}}
    doc.update(manifest or {})
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def load_checkpoint(directory) -> tuple[HeadParams, dict]:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    blocks = {name: read_fmat(os.path.join(directory, f"{name}.fmat")).features() for name in BLOCKS}
    return HeadParams(**blocks), manifest
