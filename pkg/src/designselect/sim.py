"""Synthetic, enumerable sequence-design world.

Labels follow an additive (optionally pairwise) fitness model plus Gaussian
noise. Designs come from temperature-tilted product-categorical
distributions built from an additive predictor, so every design density
and every ground-truth metric is available in closed form or by
enumeration.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, ndtr

from .inference import MEAN, SuccessCriterion
from .ratios import ProductCategorical

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class SequenceSpace:
    L: int
    A: int

    @property
    def size(self):
        return self.A**self.L

    def enumerate(self, cap=ENUMERATION_CAP):
        """All sequences in lexicographic order (site 0 most significant)."""
        if self.size > cap:
            raise ValueError(f"space of {self.size} sequences exceeds the cap {cap}")
        grids = np.indices((self.A,) * self.L).reshape(self.L, -1).T
        return grids.astype(np.intp)


def to_strings(x):
    x = np.asarray(x)
    if x.max(initial=0) >= len(ALPHABET):
        raise ValueError("alphabet too large for letter encoding")
    return ["".join(ALPHABET[v] for v in row) for row in x]


def from_strings(seqs):
    lookup = {c: i for i, c in enumerate(ALPHABET)}
    return np.array([[lookup[c] for c in s] for s in seqs], dtype=np.intp)


@dataclass(frozen=True, eq=False)
class LabelOracle:
    """``y = m(x) + N(0, noise_sd^2)`` with additive plus pairwise mean.

    ``pair_effects`` maps a site pair ``(s, t)`` to an (A, A) table.
    """

    site_effects: np.ndarray
    noise_sd: float = 0.0
    pair_effects: dict = field(default_factory=dict)

    def mean(self, x):
        x = np.asarray(x, dtype=np.intp)
        L = self.site_effects.shape[0]
        m = self.site_effects[np.arange(L), x].sum(axis=1)
        for (s, t), table in self.pair_effects.items():
            m = m + np.asarray(table)[x[:, s], x[:, t]]
        return m

    def sample(self, x, rng):
        m = self.mean(x)
        if self.noise_sd == 0:
            return m
        return m + self.noise_sd * np.random.default_rng(rng).standard_normal(m.shape)


@dataclass(frozen=True, eq=False)
class AdditivePredictor:
    """``f(x) = intercept + sum_s table[s, x_s]``."""

    table: np.ndarray
    intercept: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.intp)
        return self.intercept + self.table[np.arange(self.table.shape[0]), x].sum(axis=1)

    def biased(self, amount, symbols=None):
        """Shift the favored symbol at each site up by ``amount``.

        ``symbols`` defaults to the per-site argmax of the table.
        """
        if symbols is None:
            symbols = np.argmax(self.table, axis=1)
        table = np.array(self.table, dtype=float)
        table[np.arange(table.shape[0]), symbols] += amount
        return AdditivePredictor(table, self.intercept)

    def value_range(self):
        return (self.intercept + float(self.table.min(axis=1).sum()),
                self.intercept + float(self.table.max(axis=1).sum()))


def make_labeled_dist(space: SequenceSpace, stop_penalty: float | None = None,
                      stop_symbols=(0,)) -> ProductCategorical:
    """Near-uniform library; ``stop_penalty`` scales the stop symbols' mass."""
    w = np.ones((space.L, space.A))
    if stop_penalty is not None:
        w[:, list(stop_symbols)] *= stop_penalty
    return ProductCategorical(w / w.sum(axis=1, keepdims=True))


def sample_labeled(dist: ProductCategorical, oracle: LabelOracle, n: int, seed):
    """``n`` labeled pairs ``(x, y)``; deterministic given ``seed``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x = dist.sample(n, rng)
    return x, oracle.sample(x, rng)


@dataclass(frozen=True)
class DesignBatch:
    sequences: np.ndarray
    predictions: np.ndarray


def sample_designs(q: ProductCategorical, predictor, N: int, seed) -> DesignBatch:
    if N < 1:
        raise ValueError("N must be at least 1")
    x = q.sample(N, np.random.default_rng(seed))
    return DesignBatch(x, np.asarray(predictor(x), dtype=float))


DEFAULT_PENALTIES = tuple(10.0 ** np.arange(-4, 4))


def _ridge_solve(Xc, yc, penalty):
    F = Xc.shape[1]
    return np.linalg.solve(Xc.T @ Xc + penalty * np.eye(F), Xc.T @ yc)


def _ridge_fit(X, y, penalty):
    xm, ym = X.mean(axis=0), y.mean()
    coef = _ridge_solve(X - xm, y - ym, penalty)
    return coef, ym - xm @ coef


def fit_ridge(x, y, A: int, penalties=DEFAULT_PENALTIES, folds: int = 5,
              seed=0) -> AdditivePredictor:
    """One-hot ridge regression with the penalty picked by k-fold CV."""
    x = np.asarray(x, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    n, L = x.shape
    if n < 2:
        raise ValueError("ridge needs at least two training points")
    X = np.zeros((n, L * A))
    X[np.repeat(np.arange(n), L), (np.arange(L) * A + x).ravel()] = 1.0
    penalties = sorted(float(p) for p in penalties)
    k = min(folds, n)
    fold_of = np.random.default_rng(seed).permutation(n) % k
    best, best_err = penalties[-1], np.inf
    for pen in penalties:
        try:
            err = 0.0
            for f in range(k):
                tr, te = fold_of != f, fold_of == f
                coef, b = _ridge_fit(X[tr], y[tr], pen)
                err += np.sum((X[te] @ coef + b - y[te]) ** 2)
        except np.linalg.LinAlgError:
            continue
        if err < best_err:
            best, best_err = pen, err
    try:
        coef, b = _ridge_fit(X, y, best)
    except np.linalg.LinAlgError:
        coef, b = _ridge_fit(X, y, penalties[-1])
    return AdditivePredictor(coef.reshape(L, A), float(b))


@dataclass(frozen=True, eq=False)
class TiltedDesign:
    temperature: float
    scores: np.ndarray
    q: ProductCategorical

    def log_unnormalized(self, x):
        """``sum_s scores[s, x_s] / temperature``, the log density up to a constant."""
        x = np.asarray(x, dtype=np.intp)
        L = self.scores.shape[0]
        return self.scores[np.arange(L), x].sum(axis=1) / self.temperature


def tilt(f, temperature: float) -> TiltedDesign:
    """Product distribution with site s proportional to ``exp(f_s(a)/T)``.

    For an additive ``f`` this is exactly the tilted distribution
    ``p(x) ~ exp(f(x)/T)`` and hence its own KL projection onto product
    distributions.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    scores = np.asarray(getattr(f, "table", f), dtype=float)
    logits = scores / temperature
    probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    probs = probs / probs.sum(axis=1, keepdims=True)
    return TiltedDesign(float(temperature), scores, ProductCategorical(probs))


def brute_force_theta(q: ProductCategorical, oracle: LabelOracle,
                      crit: SuccessCriterion, cap: int = ENUMERATION_CAP) -> float:
    """``E[g(Y)]`` under designs from ``q`` by exhaustive enumeration."""
    space = SequenceSpace(q.L, q.A)
    x = space.enumerate(cap)
    p = q.all_probs()
    m = oracle.mean(x)
    if crit.kind == MEAN:
        return float(p @ m)
    if oracle.noise_sd == 0:
        return float(p @ (m >= crit.gamma).astype(float))
    return float(p @ ndtr((m - crit.gamma) / oracle.noise_sd))


def kl_divergence(p_all, q_all):
    mask = p_all > 0
    return float(np.sum(p_all[mask] * (np.log(p_all[mask]) - np.log(q_all[mask]))))


def geometric_temperatures(lo, hi, count):
    return [float(t) for t in np.geomspace(lo, hi, count)]


@dataclass(frozen=True)
class InstanceSpec:
    """Parameters of a synthetic instance; see ``build_instance``."""

    L: int = 6
    A: int = 8
    seed: int = 0
    noise_scale: float = 0.25
    n_pairs: int = 5
    pair_scale: float = 0.7
    n_train: int = 5000
    temperatures: tuple = tuple(geometric_temperatures(1.0, 10.0, 21))
    stop_penalty: float | None = None
    prediction_bias: float = 0.0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        temps = d.pop("temperatures", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown instance keys: {sorted(unknown)}")
        spec = cls(**d)
        if temps is not None:
            if isinstance(temps, dict):
                temps = geometric_temperatures(temps["min"], temps["max"], temps["count"])
            spec = replace(spec, temperatures=tuple(float(t) for t in temps))
        return spec

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["temperatures"] = list(self.temperatures)
        return d


@dataclass(eq=False)
class Instance:
    spec: InstanceSpec
    space: SequenceSpace
    oracle: LabelOracle
    labeled_dist: ProductCategorical
    predictor: AdditivePredictor
    predictor_sd: float
    designs: list
    ids: list

    def thetas(self, crit):
        return {cid: brute_force_theta(d.q, self.oracle, crit)
                for cid, d in zip(self.ids, self.designs)}

    def design(self, cid):
        return self.designs[self.ids.index(cid)]


def config_id(i):
    return f"T{i:02d}"


def build_instance(spec: InstanceSpec = InstanceSpec()) -> Instance:
    """Random oracle, trained ridge predictor, and the tilted design menu.

    The predictor is trained on ``n_train`` labeled draws; its forecast
    standard deviation is the RMSE on a 10% holdout of that training set.
    A nonzero ``prediction_bias`` shifts the predictor's favored symbol at
    every site up by that many noise standard deviations, before tilting.
    """
    ss = np.random.SeedSequence(spec.seed)
    r_oracle, r_train, r_cv = (np.random.default_rng(s) for s in ss.spawn(3))
    space = SequenceSpace(spec.L, spec.A)
    effects = r_oracle.standard_normal((spec.L, spec.A))
    pairs = {}
    site_pairs = list(itertools.combinations(range(spec.L), 2))
    for k in r_oracle.permutation(len(site_pairs))[:spec.n_pairs]:
        pairs[site_pairs[k]] = spec.pair_scale * r_oracle.standard_normal((spec.A, spec.A))
    oracle = LabelOracle(effects, spec.noise_scale * float(np.std(effects)), pairs)
    lab = make_labeled_dist(space, spec.stop_penalty)
    x, y = sample_labeled(lab, oracle, spec.n_train, r_train)
    n_hold = max(1, spec.n_train // 10)
    held = np.random.default_rng(r_cv).permutation(spec.n_train)
    f_holdout = fit_ridge(x[held[n_hold:]], y[held[n_hold:]], spec.A, seed=r_cv)
    resid = f_holdout(x[held[:n_hold]]) - y[held[:n_hold]]
    predictor_sd = float(np.sqrt(np.mean(resid**2)))
    predictor = fit_ridge(x, y, spec.A, seed=r_cv)
    if spec.prediction_bias:
        predictor = predictor.biased(spec.prediction_bias * oracle.noise_sd)
    designs = [tilt(predictor, t) for t in spec.temperatures]
    ids = [config_id(i) for i in range(len(spec.temperatures))]
    return Instance(spec, space, oracle, lab, predictor, predictor_sd, designs, ids)


def write_dataset(path, x, y, predictions):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "label", "prediction"])
        for s, yy, pp in zip(to_strings(x), y, predictions):
            w.writerow([s, repr(float(yy)), repr(float(pp))])


def read_dataset(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = from_strings([r["sequence"] for r in rows])
    y = np.array([float(r["label"]) if r["label"] != "" else np.nan for r in rows])
    pred = np.array([float(r["prediction"]) for r in rows])
    return x, y, pred
