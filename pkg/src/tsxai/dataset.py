"""Synthetic run-to-failure fleet, z-score normalization, windowing and RUL scores.

The generator stands in for N-CMAPSS: every unit starts healthy and degrades
until failure. Informative channels carry a monotone degradation trend
``drift_f * (cycle / TUL) ** exponent``; the remaining channels only carry a
per-unit operating-condition oscillation and noise.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class FleetConfig:
    n_units: int = 12
    n_channels: int = 8
    life_range: tuple[int, int] = (120, 240)
    steps_per_cycle: int = 1
    # per-channel degradation amplitude; None -> `drift` on the first
    # `n_informative` channels, 0 elsewhere
    drift_per_channel: tuple[float, ...] | None = None
    drift: float = 3.0
    n_informative: int | None = None
    exponent: float = 1.5
    noise: float = 0.3
    baseline_spread: float = 0.5
    operating_amplitude: float = 0.5

    def drifts(self) -> np.ndarray:
        if self.drift_per_channel is not None:
            d = np.asarray(self.drift_per_channel, dtype=np.float64)
            if d.shape != (self.n_channels,):
                raise ValueError("drift_per_channel needs one value per channel")
            return d
        k = self.n_channels // 2 if self.n_informative is None else self.n_informative
        d = np.zeros(self.n_channels)
        d[:k] = self.drift
        return d

    def validate(self) -> None:
        lo, hi = self.life_range
        if self.n_units < 1 or self.n_channels < 1:
            raise ValueError("n_units and n_channels must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid life_range {self.life_range}")
        if self.steps_per_cycle < 1:
            raise ValueError("steps_per_cycle must be >= 1")
        if self.noise < 0 or self.baseline_spread < 0 or self.operating_amplitude < 0:
            raise ValueError("noise and amplitude parameters must be >= 0")
        if self.n_informative is not None and not 0 <= self.n_informative <= self.n_channels:
            raise ValueError("n_informative out of range")
        self.drifts()


@dataclass
class UnitHistory:
    unit_id: int
    channels: np.ndarray  # (F, T^k)
    tul: float
    cycles: np.ndarray  # (T^k,) cycle index per step, from 0

    @property
    def length(self) -> int:
        return self.channels.shape[1]


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Sample:
    x: np.ndarray  # (F, L_w)
    y: float
    unit_id: int = -1
    t_end: int = -1


def generate_fleet(config: FleetConfig = FleetConfig(), seed: int = 0) -> list[UnitHistory]:
    config.validate()
    rng = np.random.default_rng(seed)
    drifts = config.drifts()
    F = config.n_channels
    lo, hi = config.life_range
    fleet = []
    for u in range(config.n_units):
        tul = int(rng.integers(lo, hi + 1))
        T = tul * config.steps_per_cycle
        cycles = np.arange(T) // config.steps_per_cycle
        health = (cycles / tul) ** config.exponent
        baseline = rng.normal(0.0, config.baseline_spread, size=(F, 1))
        period = rng.uniform(10.0, 40.0, size=(F, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(F, 1))
        t = np.arange(T)[None, :]
        operating = config.operating_amplitude * np.sin(2 * np.pi * t / period + phase)
        noise = config.noise * rng.standard_normal((F, T))
        channels = baseline + drifts[:, None] * health[None, :] + operating + noise
        fleet.append(UnitHistory(u, channels, float(tul), cycles))
    return fleet


# ---------------------------------------------------------------------------
# normalization


def _as_feature_matrix(data) -> np.ndarray:
    if isinstance(data, UnitHistory):
        return data.channels
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], UnitHistory):
        return np.concatenate([h.channels for h in data], axis=1)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :]
    if arr.ndim == 3:  # (B, F, T) windows
        return arr.transpose(1, 0, 2).reshape(arr.shape[1], -1)
    return arr


def zscore_fit(data) -> NormalizationStats:
    """Per-feature mean and population std.

    ``data`` is a list of UnitHistory, an ``(F, N)`` matrix or a ``(B, F, T)``
    stack. Zero-variance features get ``std = 1`` with a warning.
    """
    X = _as_feature_matrix(data)
    if X.size == 0:
        raise ValueError("cannot fit normalization on empty data")
    mean = X.mean(axis=1)
    std = X.std(axis=1)
    degenerate = std == 0
    if np.any(degenerate):
        warnings.warn(f"constant features {np.flatnonzero(degenerate).tolist()}; std set to 1",
                      RuntimeWarning, stacklevel=2)
        std = np.where(degenerate, 1.0, std)
    return NormalizationStats(mean, std)


def _apply(stats: NormalizationStats, data, fn):
    if isinstance(data, UnitHistory):
        return UnitHistory(data.unit_id, fn(data.channels), data.tul, data.cycles)
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], UnitHistory):
        return [_apply(stats, h, fn) for h in data]
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        return fn(arr[None, :])[0]
    return fn(arr)


def zscore_apply(stats: NormalizationStats, data):
    mu, sd = stats.mean[:, None], stats.std[:, None]
    return _apply(stats, data, lambda a: (a - mu) / sd)


def zscore_invert(stats: NormalizationStats, data):
    mu, sd = stats.mean[:, None], stats.std[:, None]
    return _apply(stats, data, lambda a: a * sd + mu)


# ---------------------------------------------------------------------------
# windows


def sliding_windows(history: UnitHistory, window: int) -> list[Sample]:
    """All ``T^k - L_w`` windows of a unit.

    The window ending at ``t_end`` covers steps ``(t_end - L_w, t_end]`` and is
    labelled ``TUL - C_{t_end}``; ``t_end`` runs from ``L_w`` to ``T^k - 1``.
    """
    T = history.length
    if not 1 <= window <= T:
        raise ValueError(f"window length {window} not in [1, {T}]")
    out = []
    for t_end in range(window, T):
        x = history.channels[:, t_end - window + 1: t_end + 1]
        y = float(history.tul - history.cycles[t_end])
        out.append(Sample(x.copy(), y, history.unit_id, t_end))
    return out


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.x for s in samples]) if samples else np.empty((0, 0, 0))
    y = np.array([s.y for s in samples], dtype=np.float64)
    return X, y


def split_units(fleet: Sequence[UnitHistory], test_units: int, seed: int = 0):
    """Seeded split of whole units into (train, test) lists."""
    if not 0 < test_units < len(fleet):
        raise ValueError("test_units must leave both splits nonempty")
    order = np.random.default_rng(seed).permutation(len(fleet))
    test = sorted(order[:test_units].tolist())
    train = [h for i, h in enumerate(fleet) if i not in test]
    return train, [fleet[i] for i in test]


def select_samples(samples: Sequence[Sample], n: int, seed: int = 0) -> list[int]:
    """Indices of ``n`` samples drawn without replacement in seeded order."""
    order = np.random.default_rng(seed).permutation(len(samples))
    return sorted(order[:min(n, len(samples))].tolist())


# ---------------------------------------------------------------------------
# scoring


def _pairs(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise ValueError("need equally sized, nonempty label/prediction arrays")
    return y_true, y_pred


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pairs(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def nasa_score(y_true, y_pred) -> float:
    """Mean of ``exp(alpha |y - y_hat|) - 1``; alpha = 1/13 if y_hat < y else 1/10."""
    y_true, y_pred = _pairs(y_true, y_pred)
    alpha = np.where(y_pred < y_true, 1.0 / 13.0, 1.0 / 10.0)
    return float(np.mean(np.exp(alpha * np.abs(y_true - y_pred)) - 1.0))


def combined_score(y_true, y_pred) -> float:
    return 0.5 * rmse(y_true, y_pred) + 0.5 * nasa_score(y_true, y_pred)


# ---------------------------------------------------------------------------
# files


def save_fleet(fleet: Sequence[UnitHistory], directory: str | Path,
               config: FleetConfig | None = None, seed: int | None = None) -> Path:
    """One ``unit_XXX.csv`` per unit plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    units = []
    for h in fleet:
        name = f"unit_{h.unit_id:03d}.csv"
        with open(directory / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cycle"] + [f"channel_{f}" for f in range(h.channels.shape[0])])
            for t in range(h.length):
                w.writerow([int(h.cycles[t])] + [repr(float(v)) for v in h.channels[:, t]])
        units.append({"unit_id": h.unit_id, "file": name, "tul": h.tul, "steps": h.length})
    manifest = {"units": units, "seed": seed,
                "config": None if config is None else asdict(config)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_fleet(directory: str | Path) -> list[UnitHistory]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    fleet = []
    for u in manifest["units"]:
        with open(directory / u["file"], newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        data = np.array([[float(v) for v in r] for r in rows])
        fleet.append(UnitHistory(int(u["unit_id"]), data[:, 1:].T.copy(), float(u["tul"]),
                                 data[:, 0].astype(np.int64)))
    return fleet


def config_from_manifest(directory: str | Path) -> tuple[FleetConfig | None, int | None]:
    manifest = json.loads((Path(directory) / "manifest.json").read_text())
    cfg = manifest.get("config")
    if cfg is None:
        return None, manifest.get("seed")
    cfg["life_range"] = tuple(cfg["life_range"])
    if cfg.get("drift_per_channel") is not None:
        cfg["drift_per_channel"] = tuple(cfg["drift_per_channel"])
    return FleetConfig(**cfg), manifest.get("seed")


# Sample cache layout (little-endian):
#   4s   magic b"TSXS"
#   u32  F, u32 T, u32 count
#   f64  count*F*T window values, row-major (sample, channel, time)
#   f64  count labels
_MAGIC = b"TSXS"
_HEADER = struct.Struct("<4sIII")


def save_samples(path: str | Path, X: np.ndarray, y: np.ndarray) -> None:
    X = np.ascontiguousarray(X, dtype="<f8")
    y = np.ascontiguousarray(y, dtype="<f8")
    count, F, T = X.shape
    if y.shape != (count,):
        raise ValueError("one label per sample required")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, F, T, count))
        fh.write(X.tobytes())
        fh.write(y.tobytes())


def load_samples(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, F, T, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a sample cache (magic {magic!r})")
    off = _HEADER.size
    n = count * F * T
    expected = off + 8 * (n + count)
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} != expected {expected}")
    X = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(count, F, T)
    y = np.frombuffer(raw, dtype="<f8", count=count, offset=off + 8 * n)
    return X.astype(np.float64), y.astype(np.float64)


def windows_for(fleet: Iterable[UnitHistory], window: int) -> list[Sample]:
    out = []
    for h in fleet:
        out.extend(sliding_windows(h, window))
    return out
