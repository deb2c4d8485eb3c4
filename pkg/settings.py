# settings.py — run configuration
# built-in defaults < TOML file (--config) < MOSAE_<SECTION>_<KEY> environment < command-line flags

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from errors import ContractError
from moga import GaConfig
from sae import SaeConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "MOSAE"

# ----------------- tunables -----------------
DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {
        "path": "",                 # labeled CSV; empty = synthetic fixture
        "label_column": "Class",
        "smd_dir": "",              # SMD directory (used when smd_name is set)
        "smd_name": "",
        "train_frac": 0.8,          # pool vs. held-out evaluation
        "calib_frac": 0.25,         # share of the pool kept back for threshold calibration
    },
    "data.synthetic": {
        "dims": 20,
        "n": 5000,
        "anomaly_rate": 0.02,
    },
    "sae": {
        "widths": [32, 16, 8],
        "epochs": 30,
        "batch_size": 64,
        "learning_rate": 0.01,
        "momentum": 0.9,
    },
    "ga": {
        "population": 40,
        "generations": 30,
        "crossover": 0.9,
        "mutation": None,           # per-bit rate; unset = 1 / genome length
        "elitism": 2,
        "workers": 4,
    },
    "exits": {
        "early_quantile": 0.95,
        "final_quantile": 0.99,
        "rret_policies": 200,
    },
    "clipping": {
        "step_frac": 0.05,
        "keep_frac": 1.0,           # `evaluate` only
    },
    "binpack": {
        "density": 100,
        "sweep": [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024],
        "bound_instances": 1000,
        "bound_size": 6,
        "bound_densities": [2, 16, 100, 1024],
    },
    "run": {
        "seed": 0,
        "out": "out",
        "mode": "joint",
        "timing_reps": 3,
        "log_level": "INFO",
    },
}
# --------------------------------------------


# ===== Data classes =====
@dataclass(frozen=True)
class DataSettings:
    path: str
    label_column: str
    smd_dir: str
    smd_name: str
    train_frac: float
    calib_frac: float
    synthetic_dims: int
    synthetic_n: int
    synthetic_anomaly_rate: float

    @property
    def source(self) -> str:
        if self.smd_name:
            return "smd"
        return "csv" if self.path else "synthetic"


@dataclass(frozen=True)
class RunConfig:
    data: DataSettings
    sae: Dict[str, Any]
    ga: GaConfig
    early_quantile: float
    final_quantile: float
    rret_policies: int
    step_frac: float
    keep_frac: float
    density: int
    sweep: Tuple[int, ...]
    bound_instances: int
    bound_size: int
    bound_densities: Tuple[int, ...]
    seed: int
    out: Path
    mode: str
    timing_reps: int
    log_level: str

    def sae_config(self, input_dim: int) -> SaeConfig:
        s = self.sae
        return SaeConfig(
            input_dim=input_dim,
            encoder_widths=tuple(s["widths"]),
            epochs=int(s["epochs"]),
            batch_size=int(s["batch_size"]),
            learning_rate=float(s["learning_rate"]),
            momentum=float(s["momentum"]),
            seed=self.seed,
        ).validate()

    def default_quantiles(self, depth: int) -> Tuple[float, ...]:
        return (self.early_quantile,) * (depth - 1) + (self.final_quantile,)


# ---------- helpers ----------
def _coerce(raw: str, default: Any, name: str) -> Any:
    """Parse an environment string into the type of its default."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, list):
            kind = type(default[0]) if default else str
            return [kind(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ContractError(f"{name}={raw!r} cannot be read as {type(default).__name__}") from None
    return raw


def _setting(section: str, key: str, default: Any, environ: Mapping[str, str]) -> Any:
    name = f"{ENV_PREFIX}_{section.replace('.', '_')}_{key}".upper()
    val = environ.get(name)
    if val is None or val.strip() == "":
        return default
    return _coerce(val, default, name)


def _flatten_toml(doc: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    out: Dict[str, Dict[str, Any]] = {}

    def walk(prefix: str, table: Mapping[str, Any]) -> None:
        for k, v in table.items():
            if isinstance(v, dict):
                walk(f"{prefix}.{k}" if prefix else k, v)
            else:
                if not prefix:
                    raise ContractError(f"top-level key {k!r} must live in a section")
                out.setdefault(prefix, {})[k] = v

    walk("", doc)
    return out


def _merge(base: Dict[str, Dict[str, Any]], layer: Mapping[str, Mapping[str, Any]], origin: str) -> None:
    for section, values in layer.items():
        if section not in base:
            raise ContractError(f"{origin}: unknown section [{section}]")
        for k, v in values.items():
            if k not in base[section]:
                raise ContractError(f"{origin}: unknown key {k!r} in [{section}]")
            base[section][k] = v


# ---------- public ----------
def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None,
                    environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    `overrides` maps dotted keys ("run.seed", "data.synthetic.n") to flag
    values; None entries are ignored.
    """
    environ = os.environ if environ is None else environ
    values = copy.deepcopy(DEFAULTS)

    if path:
        path = Path(path)
        if not path.is_file():
            raise ContractError(f"config file not found: {path}")
        with open(path, "rb") as f:
            try:
                doc = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ContractError(f"{path}: {e}") from e
        _merge(values, _flatten_toml(doc), str(path))
        logger.debug("config loaded from %s", path)

    for section, table in values.items():
        for key, current in table.items():
            table[key] = _setting(section, key, current, environ)

    for dotted, v in (overrides or {}).items():
        if v is None:
            continue
        section, _, key = dotted.rpartition(".")
        _merge(values, {section: {key: v}}, "command line")

    return _build(values)


def _build(v: Dict[str, Dict[str, Any]]) -> RunConfig:
    d, syn, ga, ex, cl, bp, run = (v[s] for s in ("data", "data.synthetic", "ga", "exits", "clipping", "binpack", "run"))

    if not 0.0 <= float(ex["early_quantile"]) <= 1.0:
        raise ContractError(f"exits.early_quantile must lie in [0, 1], got {ex['early_quantile']}")
    if not 0.0 < float(ex["final_quantile"]) < 1.0:
        raise ContractError(f"exits.final_quantile must lie in (0, 1), got {ex['final_quantile']}")
    if not 0.0 < float(d["calib_frac"]) < 1.0:
        raise ContractError(f"data.calib_frac must lie in (0, 1), got {d['calib_frac']}")
    if run["mode"] not in ("clip", "exit", "joint"):
        raise ContractError(f"run.mode must be clip, exit or joint, got {run['mode']!r}")

    seed = int(run["seed"])
    return RunConfig(
        data=DataSettings(
            path=str(d["path"]), label_column=str(d["label_column"]), smd_dir=str(d["smd_dir"]),
            smd_name=str(d["smd_name"]), train_frac=float(d["train_frac"]), calib_frac=float(d["calib_frac"]),
            synthetic_dims=int(syn["dims"]), synthetic_n=int(syn["n"]),
            synthetic_anomaly_rate=float(syn["anomaly_rate"]),
        ),
        sae=dict(v["sae"]),
        ga=GaConfig(
            population=int(ga["population"]), generations=int(ga["generations"]), crossover=float(ga["crossover"]),
            mutation=None if ga["mutation"] is None else float(ga["mutation"]), elitism=int(ga["elitism"]),
            seed=seed, workers=int(ga["workers"]),
        ).validate(),
        early_quantile=float(ex["early_quantile"]),
        final_quantile=float(ex["final_quantile"]),
        rret_policies=int(ex["rret_policies"]),
        step_frac=float(cl["step_frac"]),
        keep_frac=float(cl["keep_frac"]),
        density=int(bp["density"]),
        sweep=tuple(int(x) for x in bp["sweep"]),
        bound_instances=int(bp["bound_instances"]),
        bound_size=int(bp["bound_size"]),
        bound_densities=tuple(int(x) for x in bp["bound_densities"]),
        seed=seed,
        out=Path(run["out"]),
        mode=str(run["mode"]),
        timing_reps=int(run["timing_reps"]),
        log_level=str(run["log_level"]).upper(),
    )
