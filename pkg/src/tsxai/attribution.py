"""Five attribution methods producing ``F x T`` importance maps.

Gradient-based methods (saliency, Grad-CAM, LRP) are deterministic. The
surrogate methods (LIME, Kernel SHAP) segment the window per channel, sample
coalitions over the segments and fit a weighted linear model of the network
output on segment presence; the per-segment coefficients are spread back over
the segment's elements.

Grad-CAM channel alignment
--------------------------
A conv feature map has shape ``K x T`` (same padding keeps the time axis) and
no longer carries the F input channels. The heat map is therefore built on
the time axis and broadcast to all F rows::

    H(t) = sum_k g_k A_k(t)            g_k = mean_t dy/dA_k(t)
         + beta * sum_k dy/dA_k(t) A_k(t)

where the beta term is the time-resolved (per-column) gradient weighting.
The sigma term needs per-channel weights; it is taken at the network input,
the only layer whose channels are the F series::

    C(f, t) = s_f x(f, t)              s_f = mean_t dy/dx(f, t)

and the final map is ``relu(H(t) + sigma * C(f, t))``. With beta = sigma = 0
this is classic Grad-CAM broadcast over the rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import segperturb as sp
from . import tsmodel as tm

METHODS = ("saliency", "gradcam", "lrp", "lime", "kernel_shap")


class IllConditionedError(ArithmeticError):
    """The surrogate regression has no unique solution."""


@dataclass(frozen=True)
class ExplainerConfig:
    method: str
    segmentation: str = "uniform"
    n_segments: int = 8
    perturbation: str = "zero"
    neighborhood: int = 256
    full_enumeration: bool = False
    kernel_width: float = 0.25
    ridge: float = 1e-3
    shap_kernel: str = "standard"
    layer_index: int | None = None
    beta: float = 0.0
    sigma: float = 0.0
    epsilon: float = tm.DEFAULT_LRP_EPSILON
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "gradcam":
            if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.sigma <= 1.0):
                raise ValueError("beta and sigma must lie in [0, 1]")
        if self.method in ("lime", "kernel_shap"):
            if self.perturbation not in sp.PERTURBATIONS:
                raise ValueError(f"unknown perturbation {self.perturbation!r}")
            if self.segmentation not in sp.SEGMENTATIONS:
                raise ValueError(f"unknown segmentation {self.segmentation!r}")
            if self.n_segments < 1:
                raise ValueError("n_segments must be >= 1")
            if self.kernel_width <= 0 or self.ridge < 0:
                raise ValueError("kernel_width must be > 0 and ridge >= 0")
            if self.shap_kernel not in ("standard", "unscaled"):
                raise ValueError(f"unknown shap kernel {self.shap_kernel!r}")
        if self.method == "lrp" and self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def label(self) -> str:
        if self.method in ("lime", "kernel_shap"):
            return f"{self.method}-{self.perturbation}"
        return self.method

    def fingerprint(self) -> dict:
        """The fields relevant to the selected method."""
        keep = {"method", "seed"}
        if self.method == "gradcam":
            keep |= {"layer_index", "beta", "sigma"}
        elif self.method == "lrp":
            keep |= {"epsilon"}
        elif self.method in ("lime", "kernel_shap"):
            keep |= {"segmentation", "n_segments", "perturbation", "neighborhood",
                     "full_enumeration"}
            keep |= {"kernel_width", "ridge"} if self.method == "lime" else {"shap_kernel"}
        return {k: v for k, v in asdict(self).items() if k in keep}


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("attribution map must be F x T")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution map has non-finite values")


# ---------------------------------------------------------------------------
# gradient methods


def saliency(model: tm.Model, x: np.ndarray) -> AttributionMap:
    return AttributionMap(tm.input_gradient(model, x), "saliency")


def _interp_time(h: np.ndarray, T: int) -> np.ndarray:
    if h.shape[-1] == T:
        return h
    src = np.linspace(0.0, 1.0, h.shape[-1])
    return np.interp(np.linspace(0.0, 1.0, T), src, h)


def _resolve_layer(model: tm.Model, layer_index: int | None) -> int:
    convs = model.conv_indices
    if not convs:
        raise ValueError("model has no conv1d layer")
    return convs[-1] if layer_index is None else layer_index


def gradcam_components(model: tm.Model, x: np.ndarray, layer_index: int | None = None
                       ) -> dict[str, np.ndarray]:
    """Pre-ReLU building blocks of the heat map.

    ``global`` and ``time`` are length-T curves (already aligned to the input
    time axis), ``channel`` is ``F x T``.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = _resolve_layer(model, layer_index)
    A, G = tm.feature_map_gradient(model, x, idx)
    T = x.shape[1]
    alpha = G.mean(axis=1)
    glob = alpha @ A
    time = np.sum(G * A, axis=0)
    s = tm.input_gradient(model, x).mean(axis=1)
    return {"global": _interp_time(glob, T), "time": _interp_time(time, T),
            "channel": s[:, None] * x, "layer_index": idx}


def gradcam(model: tm.Model, x: np.ndarray, layer_index: int | None = None,
            beta: float = 0.0, sigma: float = 0.0) -> AttributionMap:
    if not (0.0 <= beta <= 1.0 and 0.0 <= sigma <= 1.0):
        raise ValueError("beta and sigma must lie in [0, 1]")
    comp = gradcam_components(model, x, layer_index)
    F, T = np.shape(x)
    heat = comp["global"]
    if beta:
        heat = heat + beta * comp["time"]
    raw = np.broadcast_to(heat, (F, T))
    if sigma:
        raw = raw + sigma * comp["channel"]
    values = np.maximum(raw, 0.0)
    return AttributionMap(values, "gradcam",
                          {"layer_index": comp["layer_index"], "beta": beta, "sigma": sigma})


def lrp(model: tm.Model, x: np.ndarray, epsilon: float = tm.DEFAULT_LRP_EPSILON
        ) -> AttributionMap:
    return AttributionMap(tm.relevance_propagate(model, x, epsilon), "lrp",
                          {"epsilon": epsilon})


# ---------------------------------------------------------------------------
# surrogate methods


def weighted_ridge(Z: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float
                   ) -> tuple[np.ndarray, float]:
    """Minimise ``sum w (y - b - Z c)^2 + ridge |c|^2`` with free intercept b."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.ptp(y) == 0:
        return np.zeros(Z.shape[1]), float(y[0])
    sw = w.sum()
    zbar = w @ Z / sw
    ybar = w @ y / sw
    Zc = Z - zbar
    yc = y - ybar
    A = Zc.T @ (w[:, None] * Zc) + ridge * np.eye(Z.shape[1])
    rhs = Zc.T @ (w * yc)
    if np.linalg.cond(A) > 1e12:
        raise IllConditionedError(f"normal equations ill-conditioned (cond={np.linalg.cond(A):.3g})")
    coef = np.linalg.solve(A, rhs)
    return coef, float(ybar - zbar @ coef)


def shapley_kernel_weight(M: int, size: int | np.ndarray, variant: str = "standard"):
    """Kernel SHAP weight of a coalition with ``size`` present features.

    ``standard``: (M-1) / (C(M,s) s (M-s)); ``unscaled``: (M-1) / (C(M,s) (M-s)).
    Sizes 0 and M get ``inf``.
    """
    s = np.asarray(size, dtype=np.float64)
    binom = np.vectorize(lambda k: float(math.comb(M, int(k))))(s) if s.ndim else \
        float(math.comb(M, int(s)))
    with np.errstate(divide="ignore"):
        if variant == "standard":
            w = (M - 1) / (binom * s * (M - s))
        elif variant == "unscaled":
            w = (M - 1) / (binom * (M - s))
        else:
            raise ValueError(f"unknown kernel variant {variant!r}")
    w = np.where((s == 0) | (s == M), np.inf, w)
    return float(w) if np.ndim(w) == 0 else w


def _neighborhood(cfg: ExplainerConfig, M: int, rng: np.random.Generator, exclude_extremes: bool
                  ) -> np.ndarray:
    if cfg.full_enumeration:
        if M > 20:
            raise ValueError(f"full enumeration of {M} segments is infeasible")
        masks = sp.all_coalitions(M)
        return masks[1:-1] if exclude_extremes else masks
    if cfg.neighborhood < M + 2:
        raise ValueError(f"neighborhood {cfg.neighborhood} < n_segments + 2 = {M + 2}")
    if not exclude_extremes:
        return sp.sample_coalitions(M, cfg.neighborhood, rng)
    out = np.empty((cfg.neighborhood, M), dtype=np.int8)
    filled = 0
    while filled < cfg.neighborhood:
        draw = rng.integers(0, 2, size=(cfg.neighborhood - filled, M), dtype=np.int8)
        s = draw.sum(axis=1)
        draw = draw[(s > 0) & (s < M)]
        out[filled: filled + len(draw)] = draw
        filled += len(draw)
    return out


def lime(model: tm.Model, x: np.ndarray, cfg: ExplainerConfig,
         stats: sp.FeatureStats | None = None, rng: np.random.Generator | None = None
         ) -> AttributionMap:
    """Local weighted ridge surrogate over segment presence.

    Proximity: ``exp(-d^2 / width^2)`` with d the fraction of perturbed
    segments (Hamming distance to the unperturbed sample).
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    part = sp.make_partition(x, cfg.segmentation, cfg.n_segments)
    M = part.n_segments
    masks = _neighborhood(cfg, M, rng, exclude_extremes=False)
    preds = tm.predict_batch(model, sp.perturb_many(x, part, masks, cfg.perturbation, stats, rng))
    d = masks.mean(axis=1)
    w = np.exp(-(d ** 2) / cfg.kernel_width ** 2)
    coef, intercept = weighted_ridge(1 - masks, preds, w, cfg.ridge)
    return AttributionMap(part.broadcast(coef), "lime", cfg.fingerprint(),
                          {"intercept": intercept, "coefficients": coef.tolist(),
                           "n_segments": M})


def _constrained_wls(Z: np.ndarray, y: np.ndarray, w: np.ndarray, total: float) -> np.ndarray:
    """Weighted least squares for ``y ~ Z phi`` subject to ``sum(phi) = total``."""
    last = Z[:, -1].astype(np.float64)
    X = Z[:, :-1] - last[:, None]
    r = y - last * total
    sw = np.sqrt(w)
    sol, _, rank, _ = np.linalg.lstsq(X * sw[:, None], r * sw, rcond=None)
    if rank < X.shape[1]:
        raise IllConditionedError(f"coalition design has rank {rank} < {X.shape[1]}")
    return np.append(sol, total - sol.sum())


def kernel_shap(model: tm.Model, x: np.ndarray, cfg: ExplainerConfig,
                stats: sp.FeatureStats | None = None, rng: np.random.Generator | None = None
                ) -> AttributionMap:
    """Kernel SHAP with the empty/full coalitions imposed as constraints.

    ``phi_0`` is the prediction on the fully perturbed sample and
    ``phi_0 + sum(phi) = f(x)`` holds by construction.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    part = sp.make_partition(x, cfg.segmentation, cfg.n_segments)
    M = part.n_segments
    if M < 2:
        raise ValueError("Kernel SHAP needs at least 2 segments")
    fx = tm.predict(model, x)
    base = float(tm.predict_batch(model, sp.perturb_many(
        x, part, np.ones((1, M), dtype=np.int8), cfg.perturbation, stats, rng))[0])
    masks = _neighborhood(cfg, M, rng, exclude_extremes=True)
    preds = tm.predict_batch(model, sp.perturb_many(x, part, masks, cfg.perturbation, stats, rng))
    Z = 1 - masks.astype(np.int64)
    w = shapley_kernel_weight(M, Z.sum(axis=1), cfg.shap_kernel)
    phi = _constrained_wls(Z, preds - base, w, fx - base)
    return AttributionMap(part.broadcast(phi), "kernel_shap", cfg.fingerprint(),
                          {"phi0": base, "phi": phi.tolist(), "prediction": fx,
                           "n_segments": M})


def exact_shapley_oracle(model: tm.Model, x: np.ndarray, partition: sp.SegmentPartition,
                         perturbation: str = "zero", stats: sp.FeatureStats | None = None,
                         rng: np.random.Generator | None = None) -> tuple[np.ndarray, float]:
    """Shapley values of the segments by enumerating all ``2^M`` coalitions.

    Absent segments take their values from one fully perturbed copy of ``x``.
    Returns ``(phi, v_empty)``.
    """
    M = partition.n_segments
    if M > 12:
        raise ValueError(f"{M} segments is too many for exact enumeration (max 12)")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    background = sp.perturb(x, partition, np.ones(M), perturbation, stats, rng)
    masks = sp.all_coalitions(M)  # bit i set -> segment i absent
    hit = masks.astype(bool)[:, partition.labels()]
    values = tm.predict_batch(model, np.where(hit, background[None], x[None]))
    present = 1 - masks
    size = present.sum(axis=1)
    fact = [math.factorial(k) for k in range(M + 1)]
    phi = np.zeros(M)
    for i in range(M):
        # coalitions without i, and the same coalition with i added
        without = np.flatnonzero(present[:, i] == 0)
        with_i = without - (1 << i)
        s = size[without]
        wts = np.array([fact[k] * fact[M - k - 1] / fact[M] for k in s])
        phi[i] = np.sum(wts * (values[with_i] - values[without]))
    return phi, float(values[-1])


# ---------------------------------------------------------------------------
# common interface


def explain(model: tm.Model, x: np.ndarray, cfg: ExplainerConfig,
            stats: sp.FeatureStats | None = None, rng: np.random.Generator | None = None
            ) -> AttributionMap:
    cfg.validate()
    if cfg.method == "saliency":
        out = saliency(model, x)
    elif cfg.method == "gradcam":
        out = gradcam(model, x, cfg.layer_index, cfg.beta, cfg.sigma)
    elif cfg.method == "lrp":
        out = lrp(model, x, cfg.epsilon)
    elif cfg.method == "lime":
        return lime(model, x, cfg, stats, rng)
    else:
        return kernel_shap(model, x, cfg, stats, rng)
    out.config = cfg.fingerprint()
    return out


class Explainer:
    """Callable ``(x, stream) -> F x T array`` bound to a model and config.

    ``stream`` is a tuple of ints mixed with the config seed into the random
    generator of the surrogate methods; gradient methods ignore it.
    """

    def __init__(self, model: tm.Model, cfg: ExplainerConfig,
                 stats: sp.FeatureStats | None = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.stats = stats

    @property
    def deterministic(self) -> bool:
        return self.cfg.method in ("saliency", "gradcam", "lrp")

    @property
    def name(self) -> str:
        return self.cfg.label

    def rng(self, stream: Sequence[int] = ()) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, *[int(s) for s in stream]])

    def explain(self, x: np.ndarray, stream: Sequence[int] = ()) -> AttributionMap:
        return explain(self.model, x, self.cfg, self.stats, self.rng(stream))

    def __call__(self, x: np.ndarray, stream: Sequence[int] = ()) -> np.ndarray:
        return self.explain(x, stream).values

    def with_config(self, **changes) -> "Explainer":
        return Explainer(self.model, replace(self.cfg, **changes), self.stats)


ExplainFn = Callable[..., np.ndarray]


# ---------------------------------------------------------------------------
# export


def save_csv(values: np.ndarray, path: str | Path) -> None:
    """F rows x T columns, 17 significant digits."""
    rows = [",".join(format(float(v), ".17g") for v in row) for row in np.asarray(values)]
    Path(path).write_text("\n".join(rows) + "\n")


def load_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def save_pgm(values: np.ndarray, path: str | Path, maxval: int = 255) -> dict:
    """Binary PGM (P5), min-max scaled; scaling written to ``<path>.json``."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = np.zeros(values.shape) if span == 0 else (values - lo) / span
    pix = np.rint(scaled * maxval).astype(np.uint8 if maxval < 256 else ">u2")
    F, T = values.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{T} {F}\n{maxval}\n".encode("ascii"))
        fh.write(pix.tobytes())
    side = {"min": lo, "max": hi, "maxval": maxval, "rows": F, "cols": T}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2))
    return side


def load_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    T, F, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(parts[4], dtype=dtype, count=F * T).reshape(F, T)
