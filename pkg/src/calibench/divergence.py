"""Empirical H-divergence and HΔH-distance on finite sample sets.

Two routes are provided. ``estimate_h_divergence`` trains a logistic domain
classifier and plugs its error into ``2 * (1 - min error sum)``. The brute-force
functions enumerate a finite hypothesis class exactly on the empirical measures.
``bound_relation_check`` compares ``d_HΔH`` under a class H with ``d_H_D`` under a
class H_D that contains every XOR pair of H; the second can never be smaller.
The constant lambda of the target-error bounds needs target labels and has no
code path here.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .numkit.rng import generator
from .numkit.tensor import ConfigError, ContractError


@dataclass
class SampleSets:
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.source = _as_rows(self.source)
        self.target = _as_rows(self.target)
        if len(self.source) == 0 or len(self.target) == 0:
            raise ContractError("both sample sets must be non-empty")
        if self.source.shape[1] != self.target.shape[1]:
            raise ContractError("source and target feature dimensions differ")

    def swapped(self) -> "SampleSets":
        return SampleSets(self.target, self.source)

    @property
    def pooled(self) -> np.ndarray:
        return np.concatenate([self.source, self.target])


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


# -- hypothesis classes ---------------------------------------------------------------------

class HypothesisClass:
    """A finite family of binary classifiers; ``evaluate`` returns an (n_h, n) bool matrix."""

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __len__(self) -> int:
        raise NotImplementedError


class ThresholdClass(HypothesisClass):
    """Axis-aligned thresholds ``x[axis] > t`` together with their complements."""

    def __init__(self, cuts: list[tuple[int, float]]):
        self.cuts = list(cuts)

    @classmethod
    def covering(cls, sets: SampleSets) -> "ThresholdClass":
        """Every distinct threshold dichotomy of the pooled samples, per axis."""
        X = sets.pooled
        cuts = []
        for ax in range(X.shape[1]):
            v = np.unique(X[:, ax])
            mids = np.concatenate([[v[0] - 1.0], (v[:-1] + v[1:]) / 2, [v[-1] + 1.0]])
            cuts += [(ax, float(t)) for t in mids]
        return cls(cuts)

    @classmethod
    def grid(cls, thresholds, axis: int = 0) -> "ThresholdClass":
        return cls([(axis, float(t)) for t in thresholds])

    def evaluate(self, X):
        X = _as_rows(X)
        up = np.stack([X[:, ax] > t for ax, t in self.cuts])
        return np.concatenate([up, ~up])

    def __len__(self):
        return 2 * len(self.cuts)


class IntervalClass(HypothesisClass):
    """1-D indicators of ``lo < x <= hi`` for all cut pairs, plus complements."""

    def __init__(self, cuts, axis: int = 0):
        self.cuts = sorted(float(c) for c in cuts)
        self.axis = axis

    def evaluate(self, X):
        x = _as_rows(X)[:, self.axis]
        rows = [(x > lo) & (x <= hi) for lo, hi in product(self.cuts, self.cuts) if lo <= hi]
        m = np.stack(rows)
        return np.concatenate([m, ~m])

    def __len__(self):
        n = len(self.cuts)
        return n * (n + 1)


class XorClass(HypothesisClass):
    """``{h XOR h' : h, h' in base}``."""

    def __init__(self, base: HypothesisClass):
        self.base = base

    def evaluate(self, X):
        E = self.base.evaluate(X)
        return (E[:, None, :] ^ E[None, :, :]).reshape(-1, E.shape[1])

    def __len__(self):
        return len(self.base) ** 2


class UnionClass(HypothesisClass):
    def __init__(self, *members: HypothesisClass):
        self.members = members

    def evaluate(self, X):
        return np.concatenate([m.evaluate(X) for m in self.members])

    def __len__(self):
        return sum(len(m) for m in self.members)


# -- exact oracles --------------------------------------------------------------------------

def brute_force_h_divergence(sets: SampleSets, H: HypothesisClass) -> float:
    """``2 * max_h |P_s[h=1] - P_t[h=1]|`` on the empirical measures."""
    ps = H.evaluate(sets.source).mean(axis=1)
    pt = H.evaluate(sets.target).mean(axis=1)
    return float(2 * np.max(np.abs(ps - pt)))


def _disagreement(E: np.ndarray) -> np.ndarray:
    """P[h != h'] for every pair of rows, via ``a + b - 2ab`` on counts."""
    Ef = E.astype(float)
    n = E.shape[1]
    r = Ef.sum(axis=1)
    return (r[:, None] + r[None, :] - 2 * (Ef @ Ef.T)) / n


def brute_force_hdh_distance(sets: SampleSets, H: HypothesisClass) -> float:
    """``2 * max_{h,h'} |P_s[h != h'] - P_t[h != h']|`` on the empirical measures."""
    ds = _disagreement(H.evaluate(sets.source))
    dt = _disagreement(H.evaluate(sets.target))
    return float(2 * np.max(np.abs(ds - dt)))


def _premise_holds(sets: SampleSets, H: HypothesisClass, H_D: HypothesisClass) -> bool:
    X = sets.pooled
    need = {row.tobytes() for row in XorClass(H).evaluate(X)}
    have = {row.tobytes() for row in H_D.evaluate(X)}
    return need <= have


def bound_relation_check(sets: SampleSets, H: HypothesisClass, H_D: HypothesisClass) -> tuple[float, float, bool]:
    """Return ``(d_HΔH, d_H_D, d_HΔH <= d_H_D)``.

    Raises ``ConfigError`` when some XOR pair of H is not realised in H_D on the
    pooled samples, since then the comparison says nothing.
    """
    if not _premise_holds(sets, H, H_D):
        raise ConfigError("H_D does not contain every h XOR h' of H on these samples")
    d_hdh = brute_force_hdh_distance(sets, H)
    d_hd = brute_force_h_divergence(sets, H_D)
    return d_hdh, d_hd, bool(d_hdh <= d_hd + 1e-12)


# -- trained estimator ----------------------------------------------------------------------

def error_sum(pred_source: np.ndarray, pred_target: np.ndarray) -> float:
    """``mean[eta(x_s) = 0] + mean[eta(x_t) = 1]`` with eta = 1 meaning source."""
    return float(np.mean(~pred_source) + np.mean(pred_target))


def estimate_h_divergence(sets: SampleSets, train_iters: int = 500, seed: int = 0, lr: float = 0.5) -> float:
    """Lemma-style estimate ``2 * (1 - min error sum)`` from a trained domain classifier.

    The classifier is logistic regression on standardised features, fitted by
    full-batch gradient descent with each domain weighted by ``1/m`` so the
    surrogate matches the error-sum objective. Its complement is also scored,
    as the class is symmetric. The result is clipped to [0, 2].
    """
    Xs, Xt = sets.source, sets.target
    X = sets.pooled
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Zs, Zt = (Xs - mu) / sd, (Xt - mu) / sd
    rng = generator(seed, "divergence")
    w = rng.normal(0.0, 1e-3, size=X.shape[1])
    b = 0.0
    ws, wt = 0.5 / len(Zs), 0.5 / len(Zt)
    for _ in range(train_iters):
        ps = 1.0 / (1.0 + np.exp(-(Zs @ w + b)))
        pt = 1.0 / (1.0 + np.exp(-(Zt @ w + b)))
        gs = (ps - 1.0) * ws
        gt = pt * wt
        w -= lr * (Zs.T @ gs + Zt.T @ gt)
        b -= lr * (gs.sum() + gt.sum())
    err = error_sum(Zs @ w + b > 0, Zt @ w + b > 0)
    err = min(err, 2.0 - err)
    return float(np.clip(2.0 * (1.0 - err), 0.0, 2.0))


def subsample(sets: SampleSets, n: int, seed: int = 0) -> SampleSets:
    """At most ``n`` rows per domain, drawn without replacement."""
    rng = generator(seed, "divergence", "subsample")
    pick = lambda X: X[np.sort(rng.choice(len(X), size=min(n, len(X)), replace=False))]  # noqa: E731
    return SampleSets(pick(sets.source), pick(sets.target))


def report(sets: SampleSets, seed: int = 0, train_iters: int = 500, oracle_points: int | None = None) -> dict:
    """Estimator on all samples; oracles and bound check over covering threshold classes.

    The oracles enumerate ``|H|^2`` XOR pairs, so with ``oracle_points`` they run
    on a per-domain subsample of that size.
    """
    small = sets if oracle_points is None else subsample(sets, oracle_points, seed)
    H = ThresholdClass.covering(small)
    H_D = UnionClass(H, XorClass(H))
    d_hdh, d_hd, holds = bound_relation_check(small, H, H_D)
    return {"estimate": estimate_h_divergence(sets, train_iters, seed),
            "brute_force_h": brute_force_h_divergence(small, H),
            "brute_force_hdh": d_hdh, "brute_force_h_d": d_hd, "holds": holds,
            "n_source": len(sets.source), "n_target": len(sets.target),
            "oracle_points": len(small.source)}


def random_1d_sets(seed: int, index: int, max_size: int = 8, span: int = 6) -> SampleSets:
    """Small integer-valued 1-D sample sets for randomized checks."""
    rng = generator(seed, "sets", index)
    ns, nt = rng.integers(1, max_size + 1, size=2)
    return SampleSets(rng.integers(0, span, size=ns).astype(float),
                      rng.integers(0, span, size=nt).astype(float))
