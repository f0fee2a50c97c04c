"""Transfer protocols: zero-shot prompt ensembles, few-shot episodes, linear probes."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import line_search

from .errors import ConfigError, InsufficientSamples, ShapeMismatch, ZeroNorm

DEFAULT_TEMPLATES = (
    "itap of a {class}.",
    "a bad photo of the {class}.",
    "a origami {class}.",
    "a photo of the large {class}.",
    "a {class} in a video game.",
    "art of the {class}.",
    "a photo of the small {class}.",
)

# ---------------------------------------------------------------------------
# zero-shot


@dataclass
class ZeroShotClassifier:
    class_matrix: np.ndarray  # (C, d), unit rows
    class_names: list[str]
    templates: list[str]


def build_zeroshot_classifier(class_names: Sequence[str], templates: Sequence[str],
                              text_encoder: Callable[[list[str]], np.ndarray]) -> ZeroShotClassifier:
    """Average the unit embeddings of every instantiated template per class, then renormalize."""
    if len(class_names) < 2:
        raise ConfigError("need at least two classes")
    if not templates:
        raise ConfigError("need at least one template")
    for t in templates:
        if "{class}" not in t:
            raise ConfigError(f"template {t!r} has no {{class}} slot")
    rows = []
    for c, name in enumerate(class_names):
        emb = np.asarray(text_encoder([t.replace("{class}", name) for t in templates]), dtype=np.float64)
        mean = emb.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise ZeroNorm(c)
        rows.append(mean / norm)
    return ZeroShotClassifier(np.array(rows), list(class_names), list(templates))


def zeroshot_predict(classifier: ZeroShotClassifier, image_embeddings: np.ndarray) -> np.ndarray:
    x = np.asarray(image_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != classifier.class_matrix.shape[1]:
        raise ShapeMismatch(f"image embeddings {x.shape} vs class matrix {classifier.class_matrix.shape}")
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(x @ classifier.class_matrix.T, axis=1)


def zeroshot_accuracy(classifier: ZeroShotClassifier, image_embeddings: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.shape != (np.shape(image_embeddings)[0],):
        raise ShapeMismatch("one label per image embedding required")
    if labels.size and (labels.min() < 0 or labels.max() >= len(classifier.class_names)):
        raise ShapeMismatch("label outside the classifier's classes")
    return float(np.mean(zeroshot_predict(classifier, image_embeddings) == labels))


# ---------------------------------------------------------------------------
# few-shot


@dataclass
class Episode:
    """Support and query rows with episode-local labels ``0..way-1``.

    ``classes[k]`` is the original label of episode class ``k``.
    """

    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    classes: np.ndarray


def sample_episode(features: np.ndarray, labels, way: int = 5, shot: int = 5, n_query: int = 15,
                   rng: np.random.Generator | None = None) -> Episode:
    """Draw ``way`` classes, then ``shot + n_query`` distinct samples from each."""
    rng = rng if rng is not None else np.random.default_rng()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    need = shot + n_query
    classes = np.unique(labels)
    if len(classes) < way:
        raise InsufficientSamples(None, way, len(classes))
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    for c in classes:
        if len(by_class[c]) < need:
            raise InsufficientSamples(c.item(), need, len(by_class[c]))
    chosen = rng.choice(classes, size=way, replace=False)
    s_idx, q_idx = [], []
    for c in chosen:
        picks = rng.choice(by_class[c], size=need, replace=False)
        s_idx.append(picks[:shot])
        q_idx.append(picks[shot:])
    local = np.arange(way)
    return Episode(
        features[np.concatenate(s_idx)], np.repeat(local, shot),
        features[np.concatenate(q_idx)], np.repeat(local, n_query),
        chosen,
    )


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def prototypical_accuracy(episode: Episode, normalize: bool = True) -> float:
    """Nearest class mean of the support set by squared Euclidean distance."""
    support, query = episode.support, episode.query
    if normalize:
        support, query = _unit(support), _unit(query)
    way = int(episode.support_labels.max()) + 1
    protos = np.stack([support[episode.support_labels == k].mean(axis=0) for k in range(way)])
    pred = np.argmin(_sq_dists(query, protos), axis=1)
    return float(np.mean(pred == episode.query_labels))


def weighted_knn_accuracy(episode: Episode, k: int | None = None, normalize: bool = True) -> float:
    """Inverse-distance-weighted vote over the ``k`` nearest support rows (default: all)."""
    support, query = episode.support, episode.query
    if normalize:
        support, query = _unit(support), _unit(query)
    way = int(episode.support_labels.max()) + 1
    d = np.sqrt(_sq_dists(query, support))
    k = d.shape[1] if k is None else min(k, d.shape[1])
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(query), way))
    for i, row in enumerate(nearest):
        np.add.at(votes[i], episode.support_labels[row], 1.0 / (d[i, row] + 1e-12))
    return float(np.mean(np.argmax(votes, axis=1) == episode.query_labels))


def mean_ci(accuracies) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width ``1.96 * s / sqrt(n)`` (sample std)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no accuracies")
    if a.size == 1 or np.all(a == a[0]):
        # the rounded mean of e.g. 0.6 repeated leaves a ~1e-17 residual std
        return float(a[0]), 0.0
    ci = 1.96 * a.std(ddof=1) / math.sqrt(a.size)
    return float(a.mean()), float(ci)


def fewshot_accuracies(features, labels, episodes: int = 600, seed: int = 0, way: int = 5,
                       shot: int = 5, n_query: int = 15, classifier: str = "prototypical") -> np.ndarray:
    if classifier not in ("prototypical", "weighted_knn"):
        raise ConfigError(f"unknown few-shot classifier {classifier!r}")
    score = prototypical_accuracy if classifier == "prototypical" else weighted_knn_accuracy
    accs = np.empty(episodes)
    for e in range(episodes):
        ep = sample_episode(features, labels, way, shot, n_query, np.random.default_rng([seed, e]))
        accs[e] = score(ep)
    return accs


def fewshot_eval(features, labels, episodes: int = 600, seed: int = 0, way: int = 5, shot: int = 5,
                 n_query: int = 15, classifier: str = "prototypical") -> tuple[float, float]:
    """Mean accuracy over random episodes and its 95% CI half-width.

    Episode ``e`` draws from its own stream seeded by ``(seed, e)``.
    """
    return mean_ci(fewshot_accuracies(features, labels, episodes, seed, way, shot, n_query, classifier))


# ---------------------------------------------------------------------------
# linear probe


def logreg_objective(theta: np.ndarray, X: np.ndarray, Y: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """Summed multinomial cross-entropy plus ``lam/2 * ||W||^2`` (bias unregularized).

    ``theta`` packs ``W`` (d x C, row-major) followed by the bias (C,);
    ``Y`` is one-hot (n x C).
    """
    n, d = X.shape
    C = Y.shape[1]
    W = theta[: d * C].reshape(d, C)
    b = theta[d * C:]
    z = X @ W + b
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    f = float(np.sum(lse - np.sum(Y * z, axis=1)) + 0.5 * lam * np.sum(W * W))
    P = np.exp(z - lse[:, None])
    R = P - Y
    gW = X.T @ R + lam * W
    gb = R.sum(axis=0)
    return f, np.concatenate([gW.ravel(), gb])


@dataclass
class LogRegResult:
    W: np.ndarray
    b: np.ndarray
    n_iter: int
    converged: bool
    line_search_failed: bool = False
    objective_history: list[float] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(np.asarray(X) @ self.W + self.b, axis=1)


class _Cached:
    """Memoizes the last objective evaluation; the line search asks for f and g separately."""

    def __init__(self, fn):
        self.fn = fn
        self.x = None
        self.val = None

    def __call__(self, x):
        if self.x is None or not np.array_equal(x, self.x):
            self.x = np.array(x, copy=True)
            self.val = self.fn(x)
        return self.val

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        return self(x)[1]


def _two_loop(g: np.ndarray, s_hist, y_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        q += s * (a - rho * (y @ q))
    return -q


def lbfgs_logreg(X, y, lam: float, max_iter: int = 500, n_classes: int | None = None,
                 tol: float = 1e-7, history: int = 10) -> LogRegResult:
    """Multinomial logistic regression by L-BFGS with a strong-Wolfe line search.

    Stops when the gradient's infinity norm drops below ``tol`` or after
    ``max_iter`` iterations. If the line search fails (even after falling back
    to steepest descent), the best iterate so far is returned with
    ``line_search_failed=True`` and a warning.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    n, d = X.shape
    C = int(n_classes if n_classes is not None else y.max() + 1)
    if n < C:
        raise ValueError(f"need at least as many samples ({n}) as classes ({C})")
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    obj = _Cached(lambda th: logreg_objective(th, X, Y, lam))

    theta = np.zeros(d * C + C)
    f, g = obj(theta)
    hist = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    old_old = None
    failed = False
    it = 0
    converged = bool(np.max(np.abs(g)) < tol)
    while not converged and it < max_iter:
        direction = _two_loop(g, s_hist, y_hist)
        alpha, *_ = line_search(obj.f, obj.g, theta, direction, g, f, old_old, c1=1e-4, c2=0.9)
        if alpha is None and s_hist:
            s_hist.clear()
            y_hist.clear()
            direction = -g
            alpha, *_ = line_search(obj.f, obj.g, theta, direction, g, f, None, c1=1e-4, c2=0.9)
        if alpha is None:
            failed = True
            warnings.warn("L-BFGS line search failed; returning best iterate", RuntimeWarning)
            break
        new_theta = theta + alpha * direction
        new_f, new_g = obj(new_theta)
        s, yv = new_theta - theta, new_g - g
        if yv @ s > 1e-10 * (s @ s):
            s_hist.append(s)
            y_hist.append(yv)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
        old_old, f, g, theta = f, new_f, new_g, new_theta
        hist.append(f)
        it += 1
        converged = bool(np.max(np.abs(g)) < tol)
    W = theta[: d * C].reshape(d, C).copy()
    return LogRegResult(W, theta[d * C:].copy(), it, converged, failed, hist)


def lambda_grid(steps: int = 45, lo: float = -6.0, hi: float = 5.0) -> np.ndarray:
    """``steps`` log-spaced l2 strengths from ``10**lo`` to ``10**hi`` inclusive."""
    return np.array([10.0 ** (lo + (hi - lo) * k / (steps - 1)) for k in range(steps)])


@dataclass
class ProbeResult:
    best_lambda: float
    val_acc: float
    test_acc: float
    sweep_table: list[tuple[float, float]]


def linear_probe_sweep(train, val, test, grid=None, max_iter: int = 500, jobs: int = 1) -> ProbeResult:
    """Pick lambda on the validation split, refit on train+val, score on test.

    Each split is an ``(X, y)`` pair. Ties in validation accuracy go to the
    smaller lambda.
    """
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    (Xtr, ytr), (Xva, yva), (Xte, yte) = train, val, test
    C = int(max(np.max(ytr), np.max(yva), np.max(yte)) + 1)

    def score(lam):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = lbfgs_logreg(Xtr, ytr, float(lam), max_iter, n_classes=C)
        return float(np.mean(fit.predict(Xva) == yva))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(score, grid))
    else:
        accs = [score(lam) for lam in grid]
    table = [(float(lam), acc) for lam, acc in zip(grid, accs)]
    best_lambda, best_acc = min(table, key=lambda t: (-t[1], t[0]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        final = lbfgs_logreg(np.vstack([Xtr, Xva]), np.concatenate([ytr, yva]), best_lambda, max_iter,
                             n_classes=C)
    test_acc = float(np.mean(final.predict(Xte) == yte))
    return ProbeResult(best_lambda, best_acc, test_acc, table)
