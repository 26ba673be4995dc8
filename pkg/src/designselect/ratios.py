"""Density ratios between design and labeled input distributions.

Sequences are integer arrays of shape ``(n, L)`` with symbols in
``range(A)``.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.special import logsumexp

DEFAULT_RATIO_CAP = 1e6


def _as_sequences(x, L=None):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if L is not None and x.shape[1] != L:
        raise ValueError(f"sequences have length {x.shape[1]}, expected {L}")
    return x.astype(np.intp, copy=False)


@dataclass(frozen=True, eq=False)
class ProductCategorical:
    """Independent categorical distribution per site; ``probs`` is (L, A)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("site probabilities must be an (L, A) matrix")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("site probabilities must be finite and nonnegative")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("each site's probabilities must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def L(self):
        return self.probs.shape[0]

    @property
    def A(self):
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, L, A):
        return cls(np.full((L, A), 1.0 / A))

    def prob(self, x):
        x = _as_sequences(x, self.L)
        return np.prod(self.probs[np.arange(self.L), x], axis=1)

    def log_prob(self, x):
        x = _as_sequences(x, self.L)
        with np.errstate(divide="ignore"):
            return np.sum(np.log(self.probs[np.arange(self.L), x]), axis=1)

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        cdf = np.cumsum(self.probs, axis=1)
        u = rng.random((self.L, n))
        x = np.empty((self.L, n), dtype=np.intp)
        for s in range(self.L):
            x[s] = np.searchsorted(cdf[s], u[s], side="right")
        return np.ascontiguousarray(np.minimum(x, self.A - 1).T)

    def all_probs(self):
        """Probabilities of every sequence, in ``SequenceSpace.enumerate`` order."""
        out = np.ones(1)
        for s in range(self.L):
            out = np.multiply.outer(out, self.probs[s]).ravel()
        return out

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"{self.L} {self.A}\n")
        for row in self.probs:
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        L, A = (int(v) for v in lines[0].split())
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
        if len(rows) != L or any(len(r) != A for r in rows):
            raise ValueError(f"matrix body does not match header {L} {A}")
        return cls(np.array(rows))


def _site_ratios(design, labeled):
    if design.probs.shape != labeled.probs.shape:
        raise ValueError("design and labeled distributions differ in shape")
    with np.errstate(divide="ignore", invalid="ignore"):
        return design.probs / labeled.probs


def exact_ratio(design: ProductCategorical, labeled: ProductCategorical, x):
    """``p_design(x) / p_labeled(x)``; scalar for one sequence, else an array."""
    single = np.asarray(x).ndim == 1
    xs = _as_sequences(x, design.L)
    lab = labeled.probs[np.arange(labeled.L), xs]
    if np.any(lab == 0):
        raise ValueError("labeled density is zero at a queried sequence")
    r = np.prod(design.probs[np.arange(design.L), xs] / lab, axis=1)
    return float(r[0]) if single else r


def max_ratio(design: ProductCategorical, labeled: ProductCategorical) -> float:
    """Largest attainable ratio, the product of per-site maxima."""
    r = _site_ratios(design, labeled)
    r = np.where(design.probs == 0, 0.0, r)
    if np.any(np.isnan(r)) or np.any(np.isinf(r)):
        raise ValueError("design puts mass where the labeled distribution has none")
    return float(np.prod(r.max(axis=1)))


def fit_smoothed(sequences, L: int, A: int, pseudocount: float = 1.0) -> ProductCategorical:
    """Per-site categorical MLE with add-one (Laplace) smoothing."""
    x = np.asarray(sequences)
    if x.size == 0:
        return ProductCategorical.uniform(L, A)
    x = _as_sequences(x, L)
    if x.min() < 0 or x.max() >= A:
        raise ValueError(f"symbols must lie in range({A})")
    counts = np.stack([np.bincount(x[:, s], minlength=A) for s in range(L)])
    return ProductCategorical((counts + pseudocount) / (x.shape[0] + pseudocount * A))


# --- ratio providers ----------------------------------------------------------

class RatioProvider:
    """Maps an (n, L) batch of sequences to density ratios."""

    kind = "abstract"
    max_ratio: float | None = None

    def __call__(self, x):
        raise NotImplementedError


class ExactRatio(RatioProvider):
    kind = "exact"

    def __init__(self, design: ProductCategorical, labeled: ProductCategorical):
        self.design = design
        self.labeled = labeled
        self.max_ratio = max_ratio(design, labeled)

    def __call__(self, x):
        return exact_ratio(self.design, self.labeled, _as_sequences(x))


class SmoothedRatio(ExactRatio):
    """Ratio of two Laplace-smoothed fits; no automatic ratio bound."""

    kind = "smoothed"

    def __init__(self, design, labeled, max_ratio=None):
        super().__init__(design, labeled)
        self.max_ratio = max_ratio

    @classmethod
    def from_samples(cls, design_seqs, labeled_seqs, L, A, max_ratio=None):
        return cls(fit_smoothed(design_seqs, L, A), fit_smoothed(labeled_seqs, L, A),
                   max_ratio)


class UnnormalizedRatio(RatioProvider):
    """Ratio of densities known only up to constants, from log-density callables."""

    kind = "unnormalized"

    def __init__(self, log_design_u, log_labeled_u):
        self.log_design_u = log_design_u
        self.log_labeled_u = log_labeled_u

    def __call__(self, x):
        x = _as_sequences(x)
        return np.exp(self.log_design_u(x) - self.log_labeled_u(x))


# --- multinomial logistic density-ratio estimation ---------------------------

def one_hot(x, A):
    x = _as_sequences(x)
    n, L = x.shape
    cols = (np.arange(L) * A + x).ravel()
    rows = np.repeat(np.arange(n), L)
    return sparse.csr_matrix((np.ones(n * L), (rows, cols)), shape=(n, L * A))


@dataclass
class MdreModel:
    """Linear softmax classifier over one-hot sequences.

    ``logits(x)[:, c]`` is the unnormalized log-probability of class c.
    ``log_priors`` holds the empirical class proportions, removed when
    ratios are formed so unequal class sizes do not bias them.
    """

    weights: np.ndarray
    bias: np.ndarray
    classes: list
    log_priors: np.ndarray
    L: int
    A: int
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("MDRE needs at least two classes")
        self._index = {c: i for i, c in enumerate(self.classes)}

    def class_index(self, c):
        try:
            return self._index[c]
        except KeyError:
            raise KeyError(f"class {c!r} is not registered") from None

    def logits(self, x):
        return np.asarray(one_hot(_as_sequences(x, self.L), self.A) @ self.weights.T) + self.bias

    def log_ratio(self, x, numerator, denominator):
        i, j = self.class_index(numerator), self.class_index(denominator)
        if i == j:
            return np.zeros(_as_sequences(x).shape[0])
        h = self.logits(x)
        return (h[:, i] - self.log_priors[i]) - (h[:, j] - self.log_priors[j])

    def max_log_ratio(self, numerator, denominator):
        """Exact maximum of ``log_ratio`` over all sequences.

        The logit difference is additive over sites, so the maximum is the
        sum of per-site maxima.
        """
        i, j = self.class_index(numerator), self.class_index(denominator)
        if i == j:
            return 0.0
        diff = (self.weights[i] - self.weights[j]).reshape(self.L, self.A)
        const = (self.bias[i] - self.log_priors[i]) - (self.bias[j] - self.log_priors[j])
        return float(diff.max(axis=1).sum() + const)


def fit_mdre(sample_sets, A: int, l2: float = 1e-4, tol: float = 1e-6,
             max_iter: int = 5000) -> MdreModel:
    """Fit one multinomial logistic classifier across all sample sets.

    ``sample_sets`` is a list of ``(class_id, sequences)``. The mean
    cross-entropy plus ``l2/2 * ||W||^2`` is minimized with full-batch
    L-BFGS from a zero start, so the fit is deterministic.
    """
    if len(sample_sets) < 2:
        raise ValueError("MDRE needs at least two classes")
    classes = [c for c, _ in sample_sets]
    if len(set(classes)) != len(classes):
        raise ValueError("class ids must be unique")
    arrays = [_as_sequences(seqs) for _, seqs in sample_sets]
    if any(a.shape[0] == 0 for a in arrays):
        raise ValueError("every class needs at least one sequence")
    L = arrays[0].shape[1]
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            a, b = arrays[i], arrays[j]
            if a.shape == b.shape and np.array_equal(a[np.lexsort(a.T)], b[np.lexsort(b.T)]):
                warnings.warn(f"classes {classes[i]!r} and {classes[j]!r} hold identical "
                              "sequences; their ratio is not identifiable", stacklevel=2)
    X = one_hot(np.vstack(arrays), A)
    y = np.concatenate([np.full(a.shape[0], k) for k, a in enumerate(arrays)])
    n, C, F = X.shape[0], len(classes), L * A
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    XT = X.T.tocsr()

    def objective(theta):
        W = theta[:C * F].reshape(C, F)
        b = theta[C * F:]
        h = np.asarray(X @ W.T) + b
        lse = logsumexp(h, axis=1)
        loss = np.mean(lse - h[np.arange(n), y]) + 0.5 * l2 * np.sum(W * W)
        P = np.exp(h - lse[:, None]) - Y
        gW = np.asarray(XT @ P).T / n + l2 * W
        gb = P.mean(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])

    res = optimize.minimize(objective, np.zeros(C * F + C), jac=True, method="L-BFGS-B",
                            options={"gtol": tol, "maxiter": max_iter, "ftol": 0.0})
    grad_norm = float(np.max(np.abs(res.jac)))
    counts = np.bincount(y, minlength=C)
    return MdreModel(res.x[:C * F].reshape(C, F), res.x[C * F:], classes,
                     np.log(counts / n), L, A, converged=grad_norm <= tol,
                     n_iter=int(res.nit), grad_norm=grad_norm)


def mdre_ratio(model: MdreModel, x, numerator, denominator,
               ratio_cap: float = DEFAULT_RATIO_CAP):
    """``exp(h_num(x) - h_den(x))`` clipped to ``[1/cap, cap]``."""
    single = np.asarray(x).ndim == 1
    lr = model.log_ratio(x, numerator, denominator)
    r = np.clip(np.exp(lr), 1.0 / ratio_cap, ratio_cap)
    return float(r[0]) if single else r


class ClassifierRatio(RatioProvider):
    kind = "classifier"

    def __init__(self, model: MdreModel, design_class, labeled_class,
                 ratio_cap: float = DEFAULT_RATIO_CAP, max_ratio=None):
        self.model = model
        self.design_class = design_class
        self.labeled_class = labeled_class
        self.ratio_cap = ratio_cap
        if max_ratio is None:
            max_ratio = min(ratio_cap, float(np.exp(model.max_log_ratio(design_class,
                                                                         labeled_class))))
        self.max_ratio = max_ratio

    def __call__(self, x):
        return mdre_ratio(self.model, _as_sequences(x), self.design_class,
                          self.labeled_class, self.ratio_cap)
