"""Neural causation coefficient and the collider sample filter.

The scorer embeds every standardised point ``(u_j, v_j)`` with a two-layer
ReLU MLP, mean-pools the embeddings and maps the pooled vector through a
logistic unit, so the score is invariant to the order of the points. It is
trained here on synthetic additive-noise pairs (label 1 for ``u -> v``)
against their reversals and against independent pairs (label 0).

Feature vectors become scalar sequences coordinate by coordinate: the pair
(x, z) yields the points ``(x_j, z_j)`` for j = 1..d.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import UntrainedModel
from .feature_store import RegionFeatureSet, read_fmat, write_fmat
from .seeding import fan_out
from .vc_head import HeadOptions, PairBatch, _attention, _dictionary

_BLOCKS = ("W1", "b1", "W2", "b2", "w3", "b3")
_EPS = 1e-12


@dataclass
class CauseEffectSample:
    u: np.ndarray
    v: np.ndarray
    label: int  # 1 if u -> v

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 1:
            raise ValueError("u and v must be 1-D sequences of equal length")
        if self.u.size < 2:
            raise ValueError("a cause-effect sample needs at least 2 points")


def _random_cause(rng, m):
    k = rng.integers(1, 4)
    centres = rng.normal(0, 2, k)
    widths = rng.uniform(0.3, 1.2, k)
    comp = rng.integers(0, k, m)
    return rng.normal(centres[comp], widths[comp])


def _monotone_spline(rng, u, n_knots=6):
    """Random increasing piecewise-linear map through quantile knots of ``u``."""
    knots = np.quantile(u, np.linspace(0, 1, n_knots))
    knots = np.maximum.accumulate(knots + np.arange(n_knots) * 1e-9)
    values = np.cumsum(rng.exponential(1.0, n_knots) ** 2)
    if rng.random() < 0.5:
        values = -values  # decreasing maps are monotone too
    return np.interp(u, knots, values)


def synth_pairs(kind: str, m: int, seed: int, noise_scale: float | None = None) -> CauseEffectSample:
    """One synthetic pair.

    ``additive-noise``: ``v = f(u) + e`` with ``f`` a random monotone spline and
    ``e`` uniform noise scaled by ``noise_scale * std(f(u))`` (random in
    [0.1, 0.6] when not given). ``independent``: the same construction with
    ``v`` shuffled, labelled non-causal.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    rng = np.random.default_rng(fan_out(seed, "ncc-pair"))
    u = _random_cause(rng, m)
    fu = _monotone_spline(rng, u)
    scale = rng.uniform(0.1, 0.6) if noise_scale is None else noise_scale
    noise = rng.uniform(-1, 1, m) * np.sqrt(3) * scale * (fu.std() or 1.0)
    v = fu + noise
    if kind == "additive-noise":
        return CauseEffectSample(u, v, 1)
    if kind == "independent":
        return CauseEffectSample(u, rng.permutation(v), 0)
    raise ValueError(f"unknown pair kind {kind!r}")


def standardize(seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    centred = seq - seq.mean(axis=-1, keepdims=True)
    sd = centred.std(axis=-1, keepdims=True)
    return np.divide(centred, sd, out=np.zeros_like(centred), where=sd > 0)


@dataclass
class NccModel:
    hidden: int = 32
    weights: dict = field(default_factory=dict)
    trained: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, hidden: int = 32, seed: int = 0) -> "NccModel":
        rng = np.random.default_rng(fan_out(seed, "ncc-init"))
        h = hidden
        w = {
            "W1": rng.normal(0, np.sqrt(2 / 2), (2, h)), "b1": np.zeros(h),
            "W2": rng.normal(0, np.sqrt(2 / h), (h, h)), "b2": np.zeros(h),
            "w3": rng.normal(0, np.sqrt(1 / h), h), "b3": np.zeros(1),
        }
        return cls(hidden, w)

    def logits(self, U, V, cache=None):
        """Logits for a batch of standardised sequences ``U``, ``V`` of shape (S, m)."""
        w = self.weights
        pts = np.stack([U, V], axis=-1)  # (S, m, 2)
        z1 = pts @ w["W1"] + w["b1"]
        h1 = np.maximum(z1, 0)
        z2 = h1 @ w["W2"] + w["b2"]
        h2 = np.maximum(z2, 0)
        pooled = h2.mean(axis=1)
        out = pooled @ w["w3"] + w["b3"][0]
        if cache is not None:
            cache.update(pts=pts, z1=z1, h1=h1, z2=z2, pooled=pooled)
        return out

    def grads(self, U, V, labels):
        """Mean binary cross-entropy and its gradients."""
        w = self.weights
        c = {}
        logit = self.logits(U, V, c)
        p = 1 / (1 + np.exp(-logit))
        loss = float(np.mean(np.logaddexp(0, logit) - labels * logit))
        S, m = U.shape
        dlogit = (p - labels) / S
        g = {"w3": c["pooled"].T @ dlogit, "b3": np.array([dlogit.sum()])}
        dh2 = np.broadcast_to((dlogit[:, None] * w["w3"][None, :])[:, None, :] / m, c["z2"].shape)
        dz2 = dh2 * (c["z2"] > 0)
        g["W2"] = np.einsum("smh,smk->hk", c["h1"], dz2)
        g["b2"] = dz2.sum(axis=(0, 1))
        dz1 = (dz2 @ w["W2"].T) * (c["z1"] > 0)
        g["W1"] = np.einsum("smi,smh->ih", c["pts"], dz1)
        g["b1"] = dz1.sum(axis=(0, 1))
        return loss, g


def ncc_corpus(n: int, m: int, seed: int):
    """``n`` labelled pairs cycling causal / reversed / independent."""
    U, V, y = [], [], []
    for i in range(n):
        kind = i % 3
        s = synth_pairs("independent" if kind == 2 else "additive-noise", m, seed * 1_000_003 + i)
        if kind == 1:
            U.append(s.v); V.append(s.u); y.append(0)
        else:
            U.append(s.u); V.append(s.v); y.append(s.label)
    return standardize(np.array(U)), standardize(np.array(V)), np.array(y, dtype=float)


def train_ncc(n_train: int = 3000, m: int = 48, hidden: int = 32, epochs: int = 60,
              batch: int = 64, lr: float = 3e-3, seed: int = 0) -> NccModel:
    """Adam on mean binary cross-entropy over a synthetic corpus."""
    model = NccModel.init(hidden, seed)
    U, V, y = ncc_corpus(n_train, m, seed)
    rng = np.random.default_rng(fan_out(seed, "ncc-shuffle"))
    mom = {k: np.zeros_like(v) for k, v in model.weights.items()}
    sq = {k: np.zeros_like(v) for k, v in model.weights.items()}
    b1, b2, t = 0.9, 0.999, 0
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(n_train)
        for start in range(0, n_train, batch):
            idx = perm[start:start + batch]
            loss, g = model.grads(U[idx], V[idx], y[idx])
            t += 1
            for k in model.weights:
                mom[k] = b1 * mom[k] + (1 - b1) * g[k]
                sq[k] = b2 * sq[k] + (1 - b2) * g[k] ** 2
                step = lr * (mom[k] / (1 - b1 ** t)) / (np.sqrt(sq[k] / (1 - b2 ** t)) + 1e-8)
                model.weights[k] = model.weights[k] - step
            losses.append(loss)
    model.trained = True
    model.meta = {"n_train": n_train, "m": m, "epochs": epochs, "lr": lr, "seed": seed,
                  "final_loss": float(np.mean(losses[-10:]))}
    return model


def ncc_scores(model: NccModel, U, V) -> np.ndarray:
    """Scores for rows of ``U``/``V`` (raw, standardised here), clipped inside (0, 1)."""
    if not model.trained:
        raise UntrainedModel("NCC model has not been trained or loaded")
    U = standardize(np.atleast_2d(U))
    V = standardize(np.atleast_2d(V))
    p = 1 / (1 + np.exp(-model.logits(U, V)))
    return np.clip(p, _EPS, 1 - _EPS)


def ncc_score(model: NccModel, u, v) -> float:
    """Strength of evidence for ``u -> v``."""
    return float(ncc_scores(model, np.asarray(u)[None, :], np.asarray(v)[None, :])[0])


def ncc_accuracy(model: NccModel, n: int = 600, m: int = 48, seed: int = 10_000) -> float:
    U, V, y = ncc_corpus(n, m, seed)
    pred = ncc_scores(model, U, V) > 0.5
    return float((pred == (y > 0.5)).mean())


def collider_intensity(model, batch: PairBatch, dct, params, r: int = 3, options=None) -> np.ndarray:
    """Per context pair, per top-r attended entry: min(NCC(x->z), NCC(y->z)).

    Returns an array of shape (P, r') with r' = min(r, dictionary size).
    """
    options = options or HeadOptions.for_dictionary(dct)
    Z, prior = _dictionary(dct, batch)
    if options.expectation_only:
        a = np.broadcast_to(prior, (batch.n_pairs, prior.shape[-1]))
    else:
        a = _attention(batch.Y, Z, params)[2]
    r = min(r, a.shape[1])
    top = np.argsort(-a, axis=1, kind="stable")[:, :r]
    if Z.ndim == 2:
        Zsel = Z[top]  # (P, r, d)
    else:
        Zsel = np.take_along_axis(Z, top[:, :, None], axis=1)
    Xp = np.repeat(batch.X[batch.owner][:, None, :], r, axis=1)
    Yp = np.repeat(batch.Y[:, None, :], r, axis=1)
    d = batch.X.shape[1]
    sx = ncc_scores(model, Xp.reshape(-1, d), Zsel.reshape(-1, d)).reshape(-1, r)
    sy = ncc_scores(model, Yp.reshape(-1, d), Zsel.reshape(-1, d)).reshape(-1, r)
    return np.minimum(sx, sy)


def filter_samples(batch: PairBatch, dct, model: NccModel, tau: float, params,
                   r: int = 3, options=None) -> PairBatch:
    """Drop context pairs whose attended entries look like colliders (> tau)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if batch.n_pairs == 0:
        return batch
    intensity = collider_intensity(model, batch, dct, params, r, options)
    keep = ~(intensity > tau).any(axis=1)
    if keep.all():
        return batch
    return batch.select_pairs(keep)


def make_filter(model: NccModel, tau: float, r: int = 3):
    """Adapter for :func:`vc_head.train`'s ``sample_filter`` hook."""
    def _filter(batch, dct, params):
        return filter_samples(batch, dct, model, tau, params, r)
    return _filter


def save_ncc(model: NccModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for name in _BLOCKS:
        W = np.atleast_2d(model.weights[name])
        rows = W.shape[0]
        write_fmat(RegionFeatureSet.from_arrays(W, np.zeros(rows), np.arange(rows), np.zeros(rows)),
                   os.path.join(directory, f"{name}.fmat"))
    doc = {"kind": "ncc", "hidden": model.hidden, "trained": model.trained,
           "shapes": {k: list(np.shape(v)) for k, v in model.weights.items()}, "meta": model.meta}
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ncc(directory) -> NccModel:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    weights = {}
    for name in _BLOCKS:
        W = read_fmat(os.path.join(directory, f"{name}.fmat")).features()
        weights[name] = W.reshape(doc["shapes"][name])
    return NccModel(doc["hidden"], weights, doc["trained"], doc.get("meta", {}))
