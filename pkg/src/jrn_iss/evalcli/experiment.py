"""Run configuration, experiment pipeline and certification pipeline."""

from __future__ import annotations

import copy
import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np
import tomli

from .. import serialize
from ..dynamics import (DEFAULT_DT, NOISE_VARIANCE, builtin_model, dataset_hash,
                        generate_dataset, load_dataset, save_dataset, stack_split)
from ..errors import ConfigurationError, InstabilityError, NumericalError
from ..filters import EKF_MODES, FILTER_KINDS, run_filter
from ..jrn import TrainConfig, jrn_forward, load_model, save_model, train_jrn
from ..lyapunov import (KFunctionEnvelope, LearnConfig, Region, build_error_system,
                        certify_cascade, certify_linear, iss_query, learn_iss_lyapunov,
                        plant_stability_evidence)
from ..verifier.bnb import dense_grid_violations
from .metrics import error_curve, rmse

CONFIG_VERSION = 1
REPORT_VERSION = 1

PRESETS = {
    "mass_spring": {
        "data": {"T": 300, "num_sequences": 100},
        "train": {"learning_rate": 0.01, "patience": 10, "activation": "identity",
                  "clip_norm": None},
        "filters": {"kinds": ["kf"]},
    },
    "down_pendulum": {
        "data": {"T": 300, "num_sequences": 200},
        "train": {"learning_rate": 0.01, "patience": 25, "activation": "tanh",
                  "clip_norm": 10.0},
        "filters": {"kinds": ["ekf", "ukf"]},
    },
    "reversed_vdp": {
        "data": {"T": 200, "num_sequences": 200},
        "train": {"learning_rate": 0.001, "patience": 25, "activation": "tanh",
                  "clip_norm": 10.0},
        "filters": {"kinds": ["ekf", "ukf"]},
    },
}

_SCHEMA = {
    "model": {"name": str, "dt": float, "noise": float},
    "data": {"T": int, "num_sequences": int, "seed": int},
    "train": {"learning_rate": float, "patience": float, "max_epochs": int, "batch_size": int,
              "hidden": int, "activation": str, "clip_norm": float, "seeds": list},
    "filters": {"kinds": list, "ekf_mode": str},
    "certify": {"r_e": float, "r_x": float, "exclusion": float, "lower": float, "upper": float,
                "hidden": int, "learning_rate": float, "steps_per_round": int,
                "max_rounds": int, "max_boxes": int, "delta": float, "seed": int,
                "grid_check_points": int, "Q_scale": float},
}


class StageError(RuntimeError):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    model: dict
    data: dict
    train: dict
    filters: dict
    certify: dict
    out: str = "run"
    version: int = CONFIG_VERSION

    # -- construction -----------------------------------------------------------

    @classmethod
    def preset(cls, name: str, out: str = "run") -> "RunConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"no preset for model {name!r}; choose from {sorted(PRESETS)}")
        p = copy.deepcopy(PRESETS[name])
        train = {"max_epochs": 600, "batch_size": 40, "hidden": 50, "seeds": [0, 1, 2]}
        train.update(p["train"])
        cfg = cls(
            model={"name": name, "dt": DEFAULT_DT[name], "noise": NOISE_VARIANCE},
            data={"seed": 1234, **p["data"]},
            train=train,
            filters={"ekf_mode": "current_estimate", **p["filters"]},
            certify={"r_e": 2.0, "r_x": 2.0, "exclusion": 0.1, "lower": 0.01, "upper": 100.0,
                     "hidden": 6, "learning_rate": 0.01, "steps_per_round": 2000,
                     "max_rounds": 20, "max_boxes": 1_000_000, "delta": 1e-4, "seed": 0,
                     "grid_check_points": 32, "Q_scale": 1.0},
            out=out,
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigurationError(f"config version must be {CONFIG_VERSION}, got {version!r}")
        unknown = set(d) - set(_SCHEMA) - {"out"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        model = d.get("model", {})
        if "name" not in model:
            raise ConfigurationError("config needs model.name")
        cfg = cls.preset(model["name"], out=d.get("out", "run"))
        for section in _SCHEMA:
            given = d.get(section, {})
            if not isinstance(given, dict):
                raise ConfigurationError(f"[{section}] must be a table")
            bad = set(given) - set(_SCHEMA[section])
            if bad:
                raise ConfigurationError(f"unknown keys in [{section}]: {sorted(bad)}")
            getattr(cfg, section).update(given)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                d = tomli.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid config {path}: {exc}") from exc
        return cls.from_dict(d)

    # -- validation ---------------------------------------------------------------

    def validate(self) -> None:
        for section, schema in _SCHEMA.items():
            values = getattr(self, section)
            for key, typ in schema.items():
                if key not in values:
                    continue
                v = values[key]
                if v is None and key in ("clip_norm", "dt"):
                    continue
                if typ is float and isinstance(v, int) and not isinstance(v, bool):
                    values[key] = v = float(v)
                if not isinstance(v, typ) or isinstance(v, bool):
                    raise ConfigurationError(
                        f"[{section}] {key} must be {typ.__name__}, got {v!r}")
        if self.model["name"] not in DEFAULT_DT:
            raise ConfigurationError(f"unknown model {self.model['name']!r}")
        d = self.data
        if d["T"] < 1 or d["num_sequences"] < 10 or d["num_sequences"] % 10:
            raise ConfigurationError("T >= 1 and a positive multiple of 10 sequences required")
        kinds = self.filters["kinds"]
        if not kinds or any(k not in FILTER_KINDS for k in kinds):
            raise ConfigurationError(f"filter kinds must be drawn from {FILTER_KINDS}")
        if "kf" in kinds and self.model["name"] != "mass_spring":
            raise ConfigurationError("the KF applies to the linear benchmark only")
        if self.filters["ekf_mode"] not in EKF_MODES:
            raise ConfigurationError(f"ekf_mode must be one of {EKF_MODES}")
        seeds = self.train["seeds"]
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigurationError("train.seeds must be a non-empty list of integers")
        self.train_config(seeds[0])
        self.learn_config()
        self.region()
        self.envelope()
        if self.certify["grid_check_points"] < 0 or self.certify["Q_scale"] <= 0:
            raise ConfigurationError("grid_check_points >= 0 and Q_scale > 0 required")

    # -- views --------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {"version": self.version, "model": self.model, "data": self.data,
                "train": self.train, "filters": self.filters, "certify": self.certify}

    def config_hash(self) -> str:
        # The output directory does not change any result.
        return serialize.sha256_text(serialize.dumps(self.to_dict()))

    def system(self):
        return builtin_model(self.model["name"], dt=self.model["dt"], noise=self.model["noise"])

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(learning_rate=t["learning_rate"], patience=t["patience"],
                           max_epochs=t["max_epochs"], batch_size=t["batch_size"],
                           hidden=t["hidden"], activation=t["activation"],
                           clip_norm=t["clip_norm"], seed=int(seed))

    def learn_config(self) -> LearnConfig:
        c = self.certify
        return LearnConfig(hidden=c["hidden"], learning_rate=c["learning_rate"],
                           steps_per_round=c["steps_per_round"], max_rounds=c["max_rounds"],
                           max_boxes=c["max_boxes"], delta=c["delta"], seed=c["seed"])

    def region(self) -> Region:
        c = self.certify
        return Region(r_e=c["r_e"], r_x=c["r_x"], exclusion=c["exclusion"])

    def envelope(self) -> KFunctionEnvelope:
        return KFunctionEnvelope.linear(self.certify["lower"], self.certify["upper"])

    def with_overrides(self, seed=None, out=None) -> "RunConfig":
        cfg = copy.deepcopy(self)
        if seed is not None:
            cfg.train["seeds"] = [int(seed)]
            cfg.certify["seed"] = int(seed)
        if out is not None:
            cfg.out = str(out)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _stage(name, fun, *args, **kwargs):
    try:
        return fun(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def generate_stage(cfg: RunConfig, directory=None):
    """Generate and save the dataset; returns ``(dataset, hash, dir)``."""
    directory = directory or os.path.join(cfg.out, "data")
    ds = generate_dataset(cfg.system(), cfg.data["num_sequences"], cfg.data["T"],
                          cfg.data["seed"])
    save_dataset(ds, directory, config_hash=cfg.config_hash())
    return ds, dataset_hash(directory), directory


def load_or_generate(cfg: RunConfig):
    directory = os.path.join(cfg.out, "data")
    if os.path.exists(os.path.join(directory, "meta.json")):
        ds = load_dataset(directory, cfg.system())
        return ds, dataset_hash(directory), directory
    return generate_stage(cfg, directory)


def train_stage(cfg: RunConfig, dataset, data_hash, seed: int, directory):
    """Train one seed; writes ``model.json`` and ``loss.csv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    params, report = train_jrn(dataset, cfg.train_config(seed))
    model_hash = save_model(params, os.path.join(directory, "model.json"), data_hash)
    report.write_log(os.path.join(directory, "loss.csv"))
    return params, report, model_hash


def _median_index(values):
    order = np.argsort(values, kind="stable")
    return int(order[(len(values) - 1) // 2])


def _write_curves(path, curves):
    methods = list(curves)
    T = len(next(iter(curves.values())))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t"] + [f"error_{m}" for m in methods])
        for t in range(T):
            wr.writerow([t + 1] + ["%.17g" % curves[m][t] for m in methods])


def evaluate_stage(cfg: RunConfig, dataset, params):
    """Test-split estimates for the network and each filter.

    Returns ``(rmse, curves, seconds)`` keyed by method name.
    """
    xs, ys, _ = stack_split(dataset.test)
    scores, curves, seconds = {}, {}, {}
    t0 = time.perf_counter()
    X, _ = jrn_forward(params, ys)
    seconds["jrn"] = time.perf_counter() - t0
    scores["jrn"], curves["jrn"] = rmse(xs, X), error_curve(xs, X)
    for kind in cfg.filters["kinds"]:
        t0 = time.perf_counter()
        est = run_filter(dataset.model, kind, dataset.test, mode=cfg.filters["ekf_mode"])
        seconds[kind] = time.perf_counter() - t0
        scores[kind], curves[kind] = rmse(xs, est), error_curve(xs, est)
    return scores, curves, seconds


def run_experiment(cfg: RunConfig) -> dict:
    """Dataset, training for every seed, evaluation and reports.

    Files under ``cfg.out``: ``data/``, ``seed_<s>/model.json`` and
    ``seed_<s>/loss.csv`` per seed, ``model.json`` and ``loss.csv`` of the
    seed with median test RMSE, ``error_curves.csv``, ``report.json``, and
    ``timings.json`` (wall-clock only, so excluded from the report).
    """
    os.makedirs(cfg.out, exist_ok=True)
    dataset, data_hash, _ = _stage("gen", load_or_generate, cfg)
    runs = []
    for seed in cfg.train["seeds"]:
        directory = os.path.join(cfg.out, f"seed_{seed}")
        params, report, model_hash = _stage("train", train_stage, cfg, dataset, data_hash,
                                            seed, directory)
        scores, curves, seconds = _stage("eval", evaluate_stage, cfg, dataset, params)
        runs.append(dict(seed=seed, params=params, report=report, model_hash=model_hash,
                         scores=scores, curves=curves, seconds=seconds))
    pick = runs[_median_index([r["scores"]["jrn"] for r in runs])]
    model_hash = save_model(pick["params"], os.path.join(cfg.out, "model.json"), data_hash)
    pick["report"].write_log(os.path.join(cfg.out, "loss.csv"))
    _write_curves(os.path.join(cfg.out, "error_curves.csv"), pick["curves"])
    report = {
        "format_version": REPORT_VERSION,
        "model": cfg.model["name"],
        "config_hash": cfg.config_hash(),
        "dataset_hash": data_hash,
        "model_hash": model_hash,
        "selected_seed": pick["seed"],
        "rmse": pick["scores"],
        "jrn_rmse_by_seed": {str(r["seed"]): r["scores"]["jrn"] for r in runs},
        "jrn_rmse_median": float(np.median([r["scores"]["jrn"] for r in runs])),
        "best_epoch_by_seed": {str(r["seed"]): r["report"].best_epoch for r in runs},
        "epochs_by_seed": {str(r["seed"]): len(r["report"].val_loss) for r in runs},
        "error_curves": {k: v.tolist() for k, v in pick["curves"].items()},
    }
    serialize.dump(report, os.path.join(cfg.out, "report.json"))
    serialize.dump({"test_seconds": pick["seconds"],
                    "train_seconds_by_seed": {str(r["seed"]): r["report"].seconds for r in runs}},
                   os.path.join(cfg.out, "timings.json"))
    return report


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------


def _summary(result: dict) -> str:
    lines = [f"model: {result['model']}", f"status: {result['cascade']['status']}"]
    cert = result.get("certificate")
    if cert is not None:
        lines.append(f"method: {cert['method']}, verdict: {cert['verdict']}")
    for reason in result["cascade"]["reasons"]:
        lines.append(f"reason: {reason}")
    if result.get("error"):
        lines.append(f"error: {result['error']}")
    return "\n".join(lines) + "\n"


def run_certification(cfg: RunConfig, model_path, out_dir=None, log=None) -> dict:
    """Certify a trained model and write ``certificate.json`` plus a summary.

    An identity-activation network on the linear plant gets the Lyapunov
    equation route. A tanh network gets the counterexample-guided neural
    route. Wall-clock times go to ``certificate_timings.json``.
    """
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    params = _stage("certify", load_model, model_path)
    model_hash = serialize.sha256_file(model_path)
    plant = cfg.system()
    evidence = _stage("certify", plant_stability_evidence, plant)
    result = {"format_version": 1, "model": plant.name, "model_hash": model_hash,
              "config_hash": cfg.config_hash(), "error": None}
    cert, seconds = None, {}
    try:
        es = build_error_system(plant, params)
        if es.linear is not None:
            Q = cfg.certify["Q_scale"] * np.eye(plant.n)
            cert = certify_linear(es, Q=Q, region=Region(cfg.certify["r_e"], cfg.certify["r_x"],
                                                         0.0), model_hash=model_hash)
        else:
            cert = learn_iss_lyapunov(es, cfg.envelope(), cfg.region(), cfg.learn_config(),
                                      log=log, model_hash=model_hash)
            points = cfg.certify["grid_check_points"]
            if cert.verified and points:
                query = iss_query(es, cert.candidate, cert.envelope, cert.region,
                                  cfg.certify["delta"])
                count, worst, _ = dense_grid_violations(query, points)
                cert.extra["dense_grid"] = {"points_per_axis": points, "violations": count,
                                            "worst": worst}
        seconds["certificate"] = cert.seconds
        seconds["verifier"] = cert.verifier_stats.get("verifier_seconds")
    except InstabilityError as exc:
        result["error"] = f"instability: {exc}"
    except (NumericalError, ConfigurationError) as exc:
        raise StageError("certify", exc) from exc
    result["certificate"] = cert.to_dict() if cert is not None else None
    result["cascade"] = certify_cascade(evidence, cert)
    serialize.dump(result, os.path.join(out_dir, "certificate.json"))
    serialize.dump(seconds, os.path.join(out_dir, "certificate_timings.json"))
    with open(os.path.join(out_dir, "certificate_summary.txt"), "w") as fh:
        fh.write(_summary(result))
    return result
