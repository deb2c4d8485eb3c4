# exits.py — multi-branch early-exit inference and the random-threshold (RRET) baseline

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

import sae
from clipping import ModelView, as_view
from data import Dataset, normals
from errors import ContractError

logger = logging.getLogger(__name__)

# ----------------- tunables -----------------
DISABLED = -1.0            # threshold sentinel: the exit never fires
NORMAL, ANOMALY = 0, 1
# --------------------------------------------


# ===== Data classes =====
@dataclass(frozen=True)
class ExitPolicy:
    quantiles: Tuple[Optional[float], ...]   # per exit 1..L, None = early exit disabled
    thresholds: Tuple[float, ...]
    calibration: str = ""

    def __post_init__(self):
        if len(self.quantiles) != len(self.thresholds) or not self.thresholds:
            raise ContractError("one quantile and one threshold per exit required")
        for k, (q, t) in enumerate(zip(self.quantiles, self.thresholds), start=1):
            if q is None and k == len(self.thresholds):
                raise ContractError("the final exit cannot be disabled")
            if q is None and t != DISABLED:
                raise ContractError(f"exit {k} is disabled but has threshold {t}")
            if q is not None and not (np.isfinite(t) and t >= 0.0):
                raise ContractError(f"exit {k} threshold must be finite and >= 0, got {t}")

    @property
    def depth(self) -> int:
        return len(self.thresholds)

    @property
    def early_enabled(self) -> Tuple[bool, ...]:
        return tuple(q is not None for q in self.quantiles[:-1])

    @property
    def final_threshold(self) -> float:
        return self.thresholds[-1]

    def to_dict(self) -> dict:
        return {"quantiles": list(self.quantiles), "thresholds": list(self.thresholds),
                "calibration": self.calibration}


@dataclass(frozen=True, eq=False)
class ExitTrace:
    exit_index: np.ndarray      # 1..L per sample
    verdict: np.ndarray         # 0 normal, 1 anomaly
    error: np.ndarray           # reconstruction error at the exit taken
    early_enabled: Tuple[bool, ...]

    @property
    def n(self) -> int:
        return int(self.exit_index.shape[0])

    @property
    def depth(self) -> int:
        return len(self.early_enabled) + 1

    @property
    def mean_exit(self) -> float:
        return float(self.exit_index.mean()) if self.n else float("nan")

    def exit_histogram(self) -> np.ndarray:
        return np.bincount(self.exit_index, minlength=self.depth + 1)[1:]


# ---------- calibration ----------
def _exit_errors(view, x: np.ndarray, wanted: Sequence[bool]) -> List[Optional[np.ndarray]]:
    """Errors at every wanted exit from a single encoder pass."""
    model, keep = view.model, view.keep
    xt = sae.as_tensor(model, x)
    out: List[Optional[np.ndarray]] = []
    with torch.no_grad():
        hidden = sae.encode(model, xt, keep)
        for k in range(model.depth - 1):
            out.append(sae.sample_errors(xt, model.heads[k](hidden[k])).numpy() if wanted[k] else None)
        out.append(sae.sample_errors(xt, sae.decode(model, hidden[-1], keep)).numpy())
    return out


def calibrate_exit_thresholds(model: ModelView, calib: Dataset, q: Sequence[Optional[float]]) -> ExitPolicy:
    """
    tau_k = nearest-rank quantile q_k of exit-k errors over the normal rows of
    `calib`. A None quantile disables that early exit.
    """
    view = as_view(model)
    q = tuple(None if v is None else float(v) for v in q)
    if len(q) != view.depth:
        raise ContractError(f"{len(q)} quantiles for {view.depth} exits")
    if q[-1] is None:
        raise ContractError("the final exit needs a quantile")
    for v in q:
        if v is not None and not 0.0 <= v <= 1.0:
            raise ContractError(f"quantile must lie in [0, 1], got {v}")

    calib_normals = normals(calib)
    if calib_normals.n == 0:
        raise ContractError(f"calibration set {calib.name!r} has no normal rows")

    errors = _exit_errors(view, calib_normals.features, [v is not None for v in q[:-1]])
    thresholds = tuple(DISABLED if v is None else sae.nearest_rank(e, v) for v, e in zip(q, errors))
    return ExitPolicy(q, thresholds, calibration=calib.name)


def disabled_quantiles(depth: int, final_q: float) -> Tuple[Optional[float], ...]:
    return (None,) * (depth - 1) + (final_q,)


def rret_policy(model: ModelView, calib: Dataset, seed: int) -> ExitPolicy:
    """Quantiles drawn uniformly from [0, 1] per exit, then calibrated."""
    depth = as_view(model).depth
    q = np.random.default_rng(seed).uniform(0.0, 1.0, size=depth)
    return calibrate_exit_thresholds(model, calib, [float(v) for v in q])


# ---------- inference ----------
def infer_with_exits(model: ModelView, policy: ExitPolicy, d: Dataset) -> Tuple[np.ndarray, ExitTrace]:
    """
    Early exits only ever emit NORMAL (error_k <= tau_k). Samples that pass
    every enabled early exit get the final verdict error_L > tau_L.
    Work shrinks to the still-active rows after every exit.
    """
    view = as_view(model)
    m, keep = view.model, view.keep
    L = m.depth
    if policy.depth != L:
        raise ContractError(f"policy has {policy.depth} exits, model has {L}")
    x = sae.as_tensor(m, d)
    n = x.shape[0]

    exit_index = np.full(n, L, dtype=np.int64)
    verdict = np.zeros(n, dtype=np.int8)
    error = np.empty(n, dtype=np.float64)

    active = np.arange(n)
    with torch.no_grad():
        h, xa = x, x
        for k in range(L - 1):
            h = sae.encoder_step(m, k, h, keep)
            if not policy.early_enabled[k] or active.size == 0:
                continue
            e = sae.sample_errors(xa, m.heads[k](h)).numpy()
            fire = e <= policy.thresholds[k]
            hit = active[fire]
            exit_index[hit] = k + 1
            error[hit] = e[fire]
            stay = ~fire
            rows = torch.from_numpy(stay)
            active, h, xa = active[stay], h[rows], xa[rows]

        if active.size:
            h = sae.encoder_step(m, L - 1, h, keep)
            e = sae.sample_errors(xa, sae.decode(m, h, keep)).numpy()
            error[active] = e
            verdict[active] = (e > policy.final_threshold).astype(np.int8)

    trace = ExitTrace(exit_index, verdict, error, policy.early_enabled)
    logger.debug("inference on %s: mean exit %.3f of %d", d.name, trace.mean_exit, L)
    return verdict.copy(), trace
