"""Command line orchestration: generate, train, explain, evaluate, sweep, grid, run.

All outputs of a run go to one directory. ``manifest.json`` there holds the
fully resolved configuration, so ``tsxai run --config <dir>/manifest.json``
reproduces every CSV byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime error (partial
results already written are kept).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import attribution as at
from . import dataset as ds
from . import proxies as px
from . import segperturb as sp
from . import tsmodel as tm

log = logging.getLogger("tsxai")

SCHEMA_VERSION = 1
METHOD_NAMES = {"saliency": "Saliency", "lrp": "LRP", "gradcam": "Grad-CAM", "lime": "LIME",
                "kernel_shap": "SHAP"}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    """Desk-scale experiment: 8 channels, windows of 64, 32 evaluation samples."""
    explainers = [{"method": "saliency"}, {"method": "lrp"},
                  {"method": "gradcam", "beta": 0.9, "sigma": 0.0, "layer_index": None}]
    for method in ("lime", "kernel_shap"):
        for pert in ("zero", "one", "mean", "uniform_noise", "normal_noise"):
            explainers.append({"method": method, "perturbation": pert, "n_segments": 8,
                               "neighborhood": 160})
    return {
        "version": SCHEMA_VERSION,
        "seed": 0,
        "dataset": {"fleet": asdict(ds.FleetConfig()), "window": 64, "test_units": 3,
                    "n_eval": 32},
        "model": {"path": None,
                  "training": {"conv_channels": [12, 12, 12, 12], "kernel_size": 5,
                               "dilation": 2, "dense_units": [32, 16],
                               "learning_rate": 1e-4, "batch_size": 32, "epochs": 12,
                               "momentum": 0.9}},
        "explainers": explainers,
        "proxy": asdict(px.ProxyConfig()),
        "grid": {"beta": [0.0, 1.0, 0.1], "sigma": [0.0, 1.0, 0.1], "layer_index": None},
        "sweep": {"layers": None, "beta": 0.9, "sigma": 0.0},
        "emit_heatmaps": 4,
        "out_dir": "tsxai-run",
    }


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> dict:
    """Read a config file (or a previous run's manifest) over the defaults."""
    if path is None:
        return default_config()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "config_hash" in data and "config" in data:
        data = data["config"]
    if data.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')}")
    return _merge(default_config(), data)


def grid_values(bounds) -> list[float]:
    """Grid points from ``[start, stop, step]`` (stop included)."""
    if isinstance(bounds, (list, tuple)) and len(bounds) == 3:
        start, stop, step = (float(v) for v in bounds)
        if step <= 0:
            raise ConfigError("grid step must be > 0")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise ConfigError("empty grid")
        return [round(start + i * step, 10) for i in range(n)]
    raise ConfigError(f"grid must be [start, stop, step], got {bounds!r}")


def _parse_grid_flag(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid flag must be start:stop:step, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def fleet_config(cfg: dict) -> ds.FleetConfig:
    f = dict(cfg["dataset"]["fleet"])
    f["life_range"] = tuple(f["life_range"])
    if f.get("drift_per_channel") is not None:
        f["drift_per_channel"] = tuple(f["drift_per_channel"])
    try:
        fc = ds.FleetConfig(**f)
        fc.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset.fleet: {exc}") from exc
    return fc


def explainer_configs(cfg: dict, seed: int) -> list[at.ExplainerConfig]:
    names = {f.name for f in fields(at.ExplainerConfig)}
    out = []
    for i, e in enumerate(cfg["explainers"]):
        unknown = set(e) - names
        if unknown or "method" not in e:
            raise ConfigError(f"explainers[{i}]: bad keys {sorted(unknown) or ['method']}")
        ec = at.ExplainerConfig(**{"seed": seed, **e})
        try:
            ec.validate()
        except ValueError as exc:
            raise ConfigError(f"explainers[{i}]: {exc}") from exc
        out.append(ec)
    return out


def proxy_config(cfg: dict) -> px.ProxyConfig:
    try:
        pc = px.ProxyConfig(**cfg["proxy"])
        pc.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"proxy: {exc}") from exc
    return pc


def validate_config(cfg: dict) -> None:
    fc = fleet_config(cfg)
    d = cfg["dataset"]
    if not 0 < d["test_units"] < fc.n_units:
        raise ConfigError("dataset.test_units must leave both splits nonempty")
    if d["window"] < 1 or d["window"] >= fc.life_range[0] * fc.steps_per_cycle:
        raise ConfigError("dataset.window must be shorter than the shortest unit")
    if d["n_eval"] < 3:
        raise ConfigError("dataset.n_eval must be >= 3")
    m = cfg["model"]
    if (m["path"] is None) == (m["training"] is None):
        raise ConfigError("exactly one of model.path and model.training must be set")
    if m["path"] is not None and not Path(m["path"]).exists():
        raise ConfigError(f"model.path {m['path']} does not exist")
    explainer_configs(cfg, 0)
    proxy_config(cfg)
    grid_values(cfg["grid"]["beta"])
    grid_values(cfg["grid"]["sigma"])
    if not isinstance(cfg["emit_heatmaps"], int) or cfg["emit_heatmaps"] < 0:
        raise ConfigError("emit_heatmaps must be a nonnegative integer")


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical config, ignoring where outputs go."""
    body = {k: v for k, v in cfg.items() if k != "out_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":"))
                          .encode()).hexdigest()


def derived_seeds(seed: int) -> dict[str, int]:
    names = ("fleet", "split", "init", "train", "selection", "explain")
    state = np.random.SeedSequence(seed).generate_state(len(names))
    return {n: int(s) for n, s in zip(names, state)}


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Data:
    fleet: list
    train_units: list[int]
    test_units: list[int]
    norm: ds.NormalizationStats
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    X_eval: np.ndarray
    y_eval: np.ndarray
    eval_ids: list[tuple[int, int]]


def prepare_data(cfg: dict) -> Data:
    seeds = derived_seeds(cfg["seed"])
    fleet = ds.generate_fleet(fleet_config(cfg), seeds["fleet"])
    train, test = ds.split_units(fleet, cfg["dataset"]["test_units"], seeds["split"])
    norm = ds.zscore_fit(train)

    def windows(units):
        normed = [ds.UnitHistory(h.unit_id, ds.zscore_apply(norm, h.channels), h.tul, h.cycles)
                  for h in units]
        return ds.windows_for(normed, cfg["dataset"]["window"])

    tr, te = windows(train), windows(test)
    X_train, y_train = ds.stack(tr)
    X_test, y_test = ds.stack(te)
    pick = ds.select_samples(te, cfg["dataset"]["n_eval"], seeds["selection"])
    return Data(fleet, [h.unit_id for h in train], [h.unit_id for h in test], norm,
                X_train, y_train, X_test, y_test, X_test[pick], y_test[pick],
                [(te[i].unit_id, te[i].t_end) for i in pick])


def build_model(cfg: dict, data: Data, out_dir: Path | None = None) -> tm.Model:
    m = cfg["model"]
    if m["path"] is not None:
        model = tm.load_model(m["path"])
        if model.input_shape != data.X_train.shape[1:]:
            raise ConfigError(f"model input {model.input_shape} != data "
                              f"{data.X_train.shape[1:]}")
        return model
    if out_dir is not None and (out_dir / "model.json").exists():
        model = tm.load_model(out_dir / "model.json")
        if model.metadata.get("config_hash") == config_hash(cfg):
            log.info("reusing %s", out_dir / "model.json")
            return model
    t = m["training"]
    seeds = derived_seeds(cfg["seed"])
    F, T = data.X_train.shape[1:]
    model = tm.init_model(F, T, t["conv_channels"], t["kernel_size"], t["dilation"],
                          t["dense_units"], seed=seeds["init"])
    tc = tm.TrainConfig(t["learning_rate"], t["batch_size"], t["epochs"], seeds["train"],
                        t["momentum"])
    model = tm.train(model, data.X_train, data.y_train, tc)
    meta = dict(model.metadata, config_hash=config_hash(cfg))
    return tm.Model(model.layers, model.input_shape, meta)


def model_metrics(model: tm.Model, data: Data) -> dict:
    pred = tm.predict_batch(model, data.X_test)
    return {"rmse": ds.rmse(data.y_test, pred), "nasa": ds.nasa_score(data.y_test, pred),
            "n_test": int(len(data.y_test)), "parameters": tm.parameter_count(model)}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _stats(data: Data) -> sp.FeatureStats:
    return sp.FeatureStats.from_samples(data.X_train)


def run_evaluate(cfg: dict, model: tm.Model, data: Data, out: Path) -> list[px.ProxyReport]:
    pc = proxy_config(cfg)
    stats = _stats(data)
    reports = []
    try:
        for ec in explainer_configs(cfg, derived_seeds(cfg["seed"])["explain"]):
            t0 = time.perf_counter()
            e = at.Explainer(model, ec, stats)
            perm = ec.perturbation if ec.method in ("lime", "kernel_shap") else "-"
            rep = px.evaluate_all(model, e, data.X_eval, data.y_eval, pc,
                                  METHOD_NAMES[ec.method], perm, fingerprint=ec.fingerprint())
            reports.append(rep)
            log.info("%-24s %.1fs  errors=%d", ec.label, time.perf_counter() - t0,
                     len(rep.errors))
    finally:
        px.write_reports_csv(reports, out / "report.csv")
        px.write_reports_json(reports, out / "report.json")
    return reports


def _gradcam_explainer(model, data, cfg, **kw) -> at.Explainer:
    seed = derived_seeds(cfg["seed"])["explain"]
    return at.Explainer(model, at.ExplainerConfig("gradcam", seed=seed, **kw), _stats(data))


SWEEP_PROXIES = tuple(p for p in px.PROXIES if p != "identity")


def run_sweep(cfg: dict, model: tm.Model, data: Data, out: Path) -> list[tuple]:
    layers = cfg["sweep"]["layers"]
    layers = model.conv_indices if layers is None else list(layers)
    bad = [l for l in layers if l not in model.conv_indices]
    if bad:
        raise ConfigError(f"sweep.layers {bad} are not conv layers {model.conv_indices}")
    pc = proxy_config(cfg)
    rows = []
    try:
        for l in layers:
            e = _gradcam_explainer(model, data, cfg, layer_index=l, beta=cfg["sweep"]["beta"],
                                   sigma=cfg["sweep"]["sigma"])
            rep = px.evaluate_all(model, e, data.X_eval, data.y_eval, pc, "Grad-CAM",
                                  proxies=SWEEP_PROXIES)
            rows.extend((l, p, rep.scores[p]) for p in SWEEP_PROXIES)
    finally:
        _write_csv(out / "sweep_layers.csv", ("layer", "proxy", "score"), rows)
    return rows


def run_grid(cfg: dict, model: tm.Model, data: Data, out: Path) -> list[tuple]:
    betas = grid_values(cfg["grid"]["beta"])
    sigmas = grid_values(cfg["grid"]["sigma"])
    pc = proxy_config(cfg)
    layer = cfg["grid"]["layer_index"]
    rows = []
    try:
        for b in betas:
            for s in sigmas:
                e = _gradcam_explainer(model, data, cfg, layer_index=layer, beta=b, sigma=s)
                rep = px.evaluate_all(model, e, data.X_eval, data.y_eval, pc, "Grad-CAM",
                                      proxies=SWEEP_PROXIES)
                rows.append((b, s) + tuple(rep.scores[p] for p in SWEEP_PROXIES))
    finally:
        _write_csv(out / "grid.csv", ("beta", "sigma") + SWEEP_PROXIES, rows)
    return rows


def run_explain(cfg: dict, model: tm.Model, data: Data, out: Path) -> list[str]:
    n = min(cfg["emit_heatmaps"], len(data.X_eval))
    hm = out / "heatmaps"
    hm.mkdir(parents=True, exist_ok=True)
    written = []
    stats = _stats(data)
    for ec in explainer_configs(cfg, derived_seeds(cfg["seed"])["explain"]):
        e = at.Explainer(model, ec, stats)
        for i in range(n):
            values = e(data.X_eval[i], (i, 0))
            stem = f"{ec.label}_s{i:03d}"
            at.save_csv(values, hm / f"{stem}.csv")
            at.save_pgm(values, hm / f"{stem}.pgm")
            written.append(stem)
    return written


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: dict, out: Path, data: Data | None, extra: dict | None = None) -> None:
    man = {
        "schema": SCHEMA_VERSION,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": {"master": cfg["seed"], **derived_seeds(cfg["seed"])},
        "versions": {"tsxai": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    if data is not None:
        man["split"] = {"train_units": data.train_units, "test_units": data.test_units}
        man["eval_selection"] = [list(t) for t in data.eval_ids]
    if extra:
        man.update(extra)
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[p.relative_to(out).as_posix()] = _file_digest(p)
    man["outputs"] = outputs
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or a previous manifest.json")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--model", help="trained model JSON (skips training)")
    common.add_argument("--n-eval", type=int, help="number of evaluation windows")
    common.add_argument("--group-size", type=int, help="selectivity removal group size")
    common.add_argument("--abs-importance", action="store_true", default=None,
                        help="rank importance by absolute value")
    common.add_argument("--beta-grid", help="start:stop:step for beta")
    common.add_argument("--sigma-grid", help="start:stop:step for sigma")
    common.add_argument("--layers", help="comma separated conv layer indices for the sweep")
    common.add_argument("--emit-heatmaps", type=int, help="heat maps for the first N samples")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tsxai", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("generate", "write the synthetic fleet as CSV"),
                       ("train", "train the model and write model.json"),
                       ("explain", "write heat maps for the first samples"),
                       ("evaluate", "proxy report, one row per explainer"),
                       ("sweep", "Grad-CAM proxies per conv layer"),
                       ("grid", "Grad-CAM proxies over the beta/sigma grid"),
                       ("run", "everything above"),
                       ("show-config", "print the resolved config")):
        sub.add_parser(name, parents=[common], help=text)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir is not None:
        cfg["out_dir"] = args.out_dir
    if args.model is not None:
        cfg["model"]["path"] = args.model
        cfg["model"]["training"] = None
    if args.n_eval is not None:
        cfg["dataset"]["n_eval"] = args.n_eval
    if args.group_size is not None:
        cfg["proxy"]["group_size"] = args.group_size
    if args.abs_importance:
        cfg["proxy"]["abs_importance"] = True
    if args.beta_grid is not None:
        cfg["grid"]["beta"] = _parse_grid_flag(args.beta_grid)
    if args.sigma_grid is not None:
        cfg["grid"]["sigma"] = _parse_grid_flag(args.sigma_grid)
    if args.layers is not None:
        try:
            cfg["sweep"]["layers"] = [int(v) for v in args.layers.split(",") if v]
        except ValueError as exc:
            raise ConfigError(f"--layers: {exc}") from exc
    if args.emit_heatmaps is not None:
        cfg["emit_heatmaps"] = args.emit_heatmaps
    validate_config(cfg)
    return cfg


def execute(command: str, cfg: dict) -> dict:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    extra: dict = {"command": command}
    data = None
    try:
        t0 = time.perf_counter()
        data = prepare_data(cfg)
        if command == "generate":
            ds.save_fleet(data.fleet, out / "fleet", fleet_config(cfg),
                          derived_seeds(cfg["seed"])["fleet"])
            return extra
        model = build_model(cfg, data, out)
        if cfg["model"]["path"] is None:
            tm.save_model(model, out / "model.json")
        extra["model"] = model_metrics(model, data)
        timings["data+model"] = time.perf_counter() - t0
        steps = {"train": (), "explain": (run_explain,), "evaluate": (run_evaluate,),
                 "sweep": (run_sweep,), "grid": (run_grid,),
                 "run": (run_explain, run_evaluate, run_sweep, run_grid)}[command]
        for step in steps:
            t0 = time.perf_counter()
            step(cfg, model, data, out)
            timings[step.__name__] = time.perf_counter() - t0
        return extra
    finally:
        # timings go to the log only: the manifest must be reproducible
        for k, v in timings.items():
            log.info("%s: %.1fs", k, v)
        write_manifest(cfg, out, data, extra)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    try:
        execute(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("run failed")
        print(f"runtime error ({type(exc).__name__}): {exc}; partial results in "
              f"{cfg['out_dir']}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
