"""Quantitative proxies for the quality of attribution maps.

Every proxy consumes an *explainer*: a callable ``(x, stream) -> F x T array``.
``stream`` is a tuple of ints that seeds any internal randomness, so repeated
calls with the same stream agree and calls with different streams are
independent draws. Distances between samples and between maps are Euclidean
on the flattened matrices. Features are "removed" by setting them to zero.

Explanation streams used by :func:`evaluate_all` for sample ``i``:
``(i, 0)`` primary map, ``(i, 1)`` second identity call, ``(i, 2)`` acumen
re-explanation of the perturbed sample.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata

from . import tsmodel as tm

log = logging.getLogger(__name__)

ExplainFn = Callable[..., np.ndarray]

PROXIES = ("identity", "separability", "stability", "selectivity", "coherence",
           "completeness", "congruency", "acumen")
COLUMNS = ("Method", "Perm", "I", "Sep", "Sta", "Sel", "Coh", "Comp", "Cong", "Acu")
_SHORT = dict(zip(PROXIES, COLUMNS[2:]))


@dataclass(frozen=True)
class ProxyConfig:
    group_size: int = 10
    threshold: float = 1.5
    max_features: int = 100
    abs_importance: bool = False
    identity_tol: float = 1e-12

    def validate(self) -> None:
        if self.group_size < 1 or self.max_features < 1:
            raise ValueError("group_size and max_features must be >= 1")
        if self.threshold < 0 or self.identity_tol < 0:
            raise ValueError("threshold and identity_tol must be >= 0")


@dataclass(frozen=True)
class ImportantFeatureSet:
    """Positions ``(channel, time)`` in descending importance."""

    positions: tuple[tuple[int, int], ...]
    threshold: float

    def __len__(self) -> int:
        return len(self.positions)

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        if self.positions:
            r, c = zip(*self.positions)
            m[list(r), list(c)] = True
        return m


def _importance(values: np.ndarray, use_abs: bool) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.abs(v) if use_abs else v


def order_desc(values: np.ndarray) -> np.ndarray:
    """Flat indices sorted by value descending, ties in row-major order."""
    return np.argsort(-np.asarray(values, dtype=np.float64).ravel(), kind="stable")


def select_important(values: np.ndarray, threshold: float = 1.5, max_features: int = 100,
                     use_abs: bool = False) -> ImportantFeatureSet:
    """Elements whose importance exceeds ``threshold * std`` (at most ``max_features``)."""
    v = _importance(values, use_abs)
    if not np.all(np.isfinite(v)):
        raise ValueError("attribution map has non-finite values")
    thr = threshold * float(v.std())
    if np.ptp(v) == 0:  # constant map: nothing stands out
        return ImportantFeatureSet((), thr)
    idx = order_desc(v)
    idx = idx[v.ravel()[idx] > thr][:max_features]
    T = v.shape[1]
    return ImportantFeatureSet(tuple((int(i // T), int(i % T)) for i in idx), thr)


# ---------------------------------------------------------------------------
# set-level proxies


def _flat(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return A.reshape(len(A), -1)


def identity_proxy(explainer: ExplainFn, X: np.ndarray, tol: float = 1e-12,
                   first: Sequence[np.ndarray] | None = None) -> float:
    """Fraction of samples whose two independent explanations coincide."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 1:
        raise ValueError("identity needs at least one sample")
    hits = 0
    for i, x in enumerate(X):
        a = explainer(x, (i, 0)) if first is None else first[i]
        b = explainer(x, (i, 1))
        hits += float(np.linalg.norm(np.ravel(a) - np.ravel(b))) <= tol
    return hits / len(X)


def separability_proxy(X: np.ndarray, E: np.ndarray) -> float:
    """Over pairs of distinct samples, fraction with distinct explanations."""
    X, E = _flat(X), _flat(E)
    if len(X) < 2:
        raise ValueError("separability needs at least two samples")
    dx, de = pdist(X), pdist(E)
    distinct = dx != 0
    if not distinct.any():
        raise ValueError("all samples are identical")
    return float(np.mean(de[distinct] > 0))


def spearman(a: np.ndarray, b: np.ndarray) -> float | None:
    """Spearman rho with average ranks; ``None`` when either side is constant."""
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0:
        return None
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def stability_proxy(X: np.ndarray, E: np.ndarray) -> tuple[float, int]:
    """Mean over samples of rho(distances in input space, distances in map space).

    Returns ``(score, n_degenerate)`` where degenerate rows (constant rank
    vectors) contribute 0.
    """
    X, E = _flat(X), _flat(E)
    N = len(X)
    if N < 3:
        raise ValueError("stability needs at least three samples")
    DX, DE = squareform(pdist(X)), squareform(pdist(E))
    rhos, degenerate = [], 0
    for i in range(N):
        keep = np.arange(N) != i
        r = spearman(DX[i, keep], DE[i, keep])
        if r is None:
            degenerate += 1
            r = 0.0
        rhos.append(r)
    if degenerate:
        log.warning("stability: %d of %d rank vectors had zero variance", degenerate, N)
    return float(np.mean(rhos)), degenerate


# ---------------------------------------------------------------------------
# per-sample proxies


def selectivity_curve(model: tm.Model, x: np.ndarray, y: float, values: np.ndarray,
                      group_size: int = 10, use_abs: bool = False) -> np.ndarray:
    """Absolute errors ``e_0..e_K`` after cumulatively zeroing groups of top features."""
    x = np.asarray(x, dtype=np.float64)
    order = order_desc(_importance(values, use_abs))
    K = math.ceil(order.size / group_size)
    batch = np.repeat(x.ravel()[None], K + 1, axis=0)
    for j in range(1, K + 1):
        batch[j:, order[(j - 1) * group_size: j * group_size]] = 0.0
    preds = tm.predict_batch(model, batch.reshape((K + 1,) + x.shape))
    return np.abs(y - preds)


def selectivity_from_errors(errors: np.ndarray) -> float:
    """Trapezoid AUC of the normalised error increase over the removal fraction.

    ``c_j = (e_j - e_0) / (max e - e_0)``, clamped at 0 so that removals which
    lower the error count as no increase; the score lies in [0, 1].
    """
    e = np.asarray(errors, dtype=np.float64)
    K = len(e) - 1
    span = e[1:].max() - e[0] if K else 0.0
    if span <= 0:
        return 0.0
    c = np.concatenate([[0.0], np.maximum((e[1:] - e[0]) / span, 0.0)])
    return float(trapezoid(c, np.linspace(0.0, 1.0, K + 1)))


def selectivity_proxy(model: tm.Model, x: np.ndarray, y: float, values: np.ndarray,
                      group_size: int = 10, use_abs: bool = False) -> float:
    return selectivity_from_errors(selectivity_curve(model, x, y, values, group_size, use_abs))


@dataclass
class CoherenceResult:
    alpha: float
    p_e: float
    e_e: float
    empty: bool


def coherence_proxy(model: tm.Model, x: np.ndarray, y: float,
                    important: ImportantFeatureSet) -> CoherenceResult:
    """Prediction error with only the important features kept vs the original error."""
    x = np.asarray(x, dtype=np.float64)
    kept = np.where(important.mask(x.shape), x, 0.0)
    preds = tm.predict_batch(model, np.stack([x, kept]))
    p_e, e_e = abs(y - preds[0]), abs(y - preds[1])
    return CoherenceResult(abs(p_e - e_e), p_e, e_e, len(important) == 0)


def completeness_proxy(p_e: float, e_e: float) -> float | None:
    """``e_e / p_e``; ``None`` for a perfectly predicted sample."""
    return None if p_e == 0 else e_e / p_e


def congruency_proxy(alphas: Sequence[float]) -> float:
    a = np.asarray(alphas, dtype=np.float64)
    if a.size == 0:
        raise ValueError("congruency needs at least one coherence value")
    return 0.0 if np.ptp(a) == 0 else float(a.std())


def acumen_score(new_values: np.ndarray, important: ImportantFeatureSet,
                 use_abs: bool = False) -> float | None:
    """``1 - mean position / N`` of the important features in the new map.

    Positions count from the least important (0) with ties averaged.
    """
    if len(important) == 0:
        return None
    v = _importance(new_values, use_abs)
    pos = (rankdata(v.ravel(), method="average") - 1).reshape(v.shape)
    r, c = zip(*important.positions)
    return float(1.0 - np.mean(pos[list(r), list(c)]) / v.size)


def acumen_proxy(explainer: ExplainFn, x: np.ndarray, important: ImportantFeatureSet,
                 stream: Sequence[int] = (), use_abs: bool = False) -> float | None:
    if len(important) == 0:
        return None
    x = np.asarray(x, dtype=np.float64)
    xp = np.where(important.mask(x.shape), 0.0, x)
    return acumen_score(explainer(xp, tuple(stream)), important, use_abs)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class ProxyReport:
    method: str
    perm: str
    scores: dict[str, float]
    n_samples: int
    fingerprint: dict = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    errors: list[tuple[int, str]] = field(default_factory=list)
    stability_degenerate: int = 0

    def row(self) -> dict:
        out = {"Method": self.method, "Perm": self.perm}
        for p in PROXIES:
            out[_SHORT[p]] = self.scores.get(p, math.nan)
        return out

    def to_dict(self) -> dict:
        return {"method": self.method, "perm": self.perm, "fingerprint": self.fingerprint,
                "scores": {p: self.scores[p] for p in PROXIES if p in self.scores},
                "n_samples": self.n_samples, "skipped": self.skipped,
                "errors": [list(e) for e in self.errors],
                "stability_degenerate": self.stability_degenerate}


def _mean(vals: list[float]) -> float:
    return float(np.mean(vals)) if vals else math.nan


def _sample_proxies(model, explainer, x, y, i, config, want):
    """Per-sample part of :func:`evaluate_all`; ``None`` marks an undefined proxy."""
    res: dict = {}
    e = np.asarray(explainer(x, (i, 0)), dtype=np.float64)
    if e.shape != x.shape or not np.all(np.isfinite(e)):
        raise ValueError(f"explanation has shape {e.shape} or non-finite values")
    if "identity" in want:
        e2 = np.asarray(explainer(x, (i, 1)), dtype=np.float64)
        res["identity"] = float(np.linalg.norm((e - e2).ravel())) <= config.identity_tol
    imp = select_important(e, config.threshold, config.max_features, config.abs_importance)
    if "selectivity" in want:
        res["selectivity"] = selectivity_proxy(model, x, y, e, config.group_size,
                                               config.abs_importance)
    if want & {"coherence", "completeness", "congruency"}:
        coh = coherence_proxy(model, x, y, imp)
        res["coherence"] = coh.alpha
        res["coherence_empty"] = int(coh.empty)
        res["completeness"] = completeness_proxy(coh.p_e, coh.e_e)
    if "acumen" in want:
        res["acumen"] = acumen_proxy(explainer, x, imp, (i, 2), config.abs_importance)
    return e, res


def evaluate_all(model: tm.Model, explainer: ExplainFn, X: np.ndarray, y: np.ndarray,
                 config: ProxyConfig = ProxyConfig(), method: str = "", perm: str = "-",
                 proxies: Sequence[str] = PROXIES, fingerprint: dict | None = None
                 ) -> ProxyReport:
    """Compute the requested proxies on ``(X, y)`` and average per-sample scores.

    A sample whose explanation fails is recorded in ``errors`` and left out of
    every proxy. Samples where a proxy is undefined (no important feature for
    acumen, zero prediction error for completeness) are counted in
    ``skipped``.
    """
    config.validate()
    unknown = set(proxies) - set(PROXIES)
    if unknown:
        raise ValueError(f"unknown proxies {sorted(unknown)}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("need a nonempty sample set with one label per sample")
    want = set(proxies)
    per: dict[str, list[float]] = {p: [] for p in PROXIES}
    skipped = {p: 0 for p in ("coherence", "completeness", "acumen")}
    errors: list[tuple[int, str]] = []
    ok_idx, maps, same = [], [], []
    for i, x in enumerate(X):
        try:
            e, res = _sample_proxies(model, explainer, x, y[i], i, config, want)
        except Exception as exc:  # isolate the failing sample
            log.warning("sample %d failed: %s", i, exc)
            errors.append((i, f"{type(exc).__name__}: {exc}"))
            continue
        ok_idx.append(i)
        maps.append(e)
        if "identity" in res:
            same.append(res.pop("identity"))
        for p, v in res.items():
            if v is None:
                skipped[p] += 1
            elif p == "coherence_empty":
                skipped["coherence"] += v
            else:
                per[p].append(v)

    scores: dict[str, float] = {}
    degenerate = 0
    Xok, Eok = X[ok_idx], np.array(maps)
    if "identity" in want:
        scores["identity"] = _mean([float(s) for s in same])
    if "separability" in want:
        try:
            scores["separability"] = separability_proxy(Xok, Eok)
        except ValueError:  # fewer than two distinct samples
            scores["separability"] = math.nan
    if "stability" in want:
        if len(ok_idx) >= 3:
            scores["stability"], degenerate = stability_proxy(Xok, Eok)
        else:
            scores["stability"] = math.nan
    for p in ("selectivity", "coherence", "completeness", "acumen"):
        if p in want:
            scores[p] = _mean(per[p])
    if "congruency" in want:
        scores["congruency"] = congruency_proxy(per["coherence"]) if per["coherence"] \
            else math.nan
    return ProxyReport(method, perm, scores, len(ok_idx), fingerprint or {},
                       {k: v for k, v in skipped.items() if k in want}, errors, degenerate)


# ---------------------------------------------------------------------------
# serialisation


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_reports_csv(reports: Sequence[ProxyReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in reports:
            row = r.row()
            w.writerow([_fmt(row[c]) for c in COLUMNS])


def write_reports_json(reports: Sequence[ProxyReport], path: str | Path) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(u) for k, u in v.items()}
        if isinstance(v, list):
            return [clean(u) for u in v]
        return v
    with open(path, "w") as fh:
        json.dump([clean(r.to_dict()) for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_reports_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
