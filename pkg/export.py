# export.py — report writers: CSV tables, JSON documents, static SVG scatter plots

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd

from errors import ContractError, UndefinedCorrelationError
from objectives import correlation

logger = logging.getLogger(__name__)

# ----------------- tunables -----------------
SVG_HASH_SALT = "mosae"      # stable element ids across runs
FIG_SIZE = (5.0, 4.0)
MARKER_SIZE = 16
POINTS_GID = "points"
# --------------------------------------------

# column orders for every CSV report
SCHEDULE_COLS = ["step", "retained_fraction", "f1", "storage_ratio", "power_ratio", "runtime_s", "mean_exit"]
ARCHIVE_COLS = ["generation", "genome_hex", "f1", "runtime_s", "storage_ratio", "power_ratio",
                "kept_neurons", "quantiles", "front_rank"]
RRET_COLS = ["policy", "seed", "runtime_s", "power_ratio", "f1", "storage_ratio", "mean_exit", "quantiles"]
SWEEP_COLS = ["density", "f1", "runtime_s", "formula_rate", "wire_bytes", "max_abs_error"]

PathLike = Union[str, Path]


# ---------- helpers ----------
def _ensure_cols(df: pd.DataFrame, cols: Sequence[str]) -> pd.DataFrame:
    """Known columns first in their fixed order (missing ones added empty), extras after."""
    df = df.copy()
    for c in cols:
        if c not in df.columns:
            df[c] = pd.NA
    extras = [c for c in df.columns if c not in cols]
    return df[list(cols) + extras]


def _json_default(o: Any) -> Any:
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


# ---------- writers ----------
def write_csv(path: PathLike, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    path = Path(path)
    df = _ensure_cols(pd.DataFrame(list(rows)), columns)
    df.to_csv(path, index=False, float_format="%.10g")
    logger.info("wrote %s (%d rows)", path, len(df))
    return path


def write_json(path: PathLike, doc: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_scatter_svg(path: PathLike, x: Sequence[float], y: Sequence[float],
                      xlabel: str, ylabel: str, title: str = "") -> Path:
    """One marker per point, grouped under the `points` gid."""
    path = Path(path)
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=FIG_SIZE)
        try:
            points = ax.scatter(np.asarray(x, dtype=float), np.asarray(y, dtype=float), s=MARKER_SIZE)
            points.set_gid(POINTS_GID)
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            if title:
                ax.set_title(title)
            ax.grid(True, alpha=0.3)
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    logger.info("wrote %s (%d points)", path, len(x))
    return path


def correlation_summary(df: pd.DataFrame, pairs: Sequence[tuple]) -> Dict[str, Dict[str, Optional[float]]]:
    """PCC and SRCC per column pair; None where a column is constant or there are fewer than 3 rows."""
    out: Dict[str, Dict[str, Optional[float]]] = {}
    for a, b in pairs:
        entry: Dict[str, Optional[float]] = {}
        for method in ("pearson", "spearman"):
            try:
                entry[method] = correlation(df[a].to_numpy(), df[b].to_numpy(), method)
            except (UndefinedCorrelationError, ContractError):
                entry[method] = None
        out[f"{a}~{b}"] = entry
    return out


# ---------- partial-output cleanup ----------
class OutputGuard:
    """
    Tracks files a command writes. On failure, files it created are removed
    and files that existed beforehand get their previous bytes back.
    """

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.written: List[Path] = []
        self.backups: Dict[Path, bytes] = {}

    def track(self, p: PathLike) -> Path:
        p = Path(p)
        if p in self.backups or p in self.written:
            return p
        if p.is_file():
            self.backups[p] = p.read_bytes()
        else:
            self.written.append(p)
        return p

    def path(self, name: str) -> Path:
        return self.track(self.out_dir / name)

    def __enter__(self) -> "OutputGuard":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            for p in self.written:
                if p.exists():
                    p.unlink()
                    logger.warning("removed partial output %s", p)
            for p, blob in self.backups.items():
                p.write_bytes(blob)
                logger.warning("restored %s", p)
        return False
