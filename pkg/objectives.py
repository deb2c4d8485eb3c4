# objectives.py — four-objective cost model (F1, runtime, storage, power) and PCC / SRCC analysis

from __future__ import annotations

import logging
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from sklearn import metrics

import clipping
import exits
from clipping import ClipMask
from data import Dataset
from errors import ContractError, UndefinedCorrelationError
from exits import ExitPolicy, ExitTrace
from sae import SaeModel

logger = logging.getLogger(__name__)

# ----------------- tunables -----------------
DEFAULT_TIMING_REPS = 3
DEFAULT_FINAL_QUANTILE = 0.99
# --------------------------------------------

_TIMING_LOCK = threading.Lock()


# ===== Data classes =====
@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError(f"negative confusion count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ObjectiveVector:
    f1: float
    runtime_s: float
    storage_ratio: float
    power_ratio: float

    def minimization(self) -> Tuple[float, float, float, float]:
        return (1.0 - self.f1, self.runtime_s, self.storage_ratio, self.power_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class EvalContext:
    model: SaeModel
    eval_set: Dataset
    calib_set: Dataset
    reps: int = DEFAULT_TIMING_REPS
    final_quantile: float = DEFAULT_FINAL_QUANTILE

    def __post_init__(self):
        for d in (self.eval_set, self.calib_set):
            if d.dims != self.model.input_dim:
                raise ContractError(f"{d.name} has {d.dims} features, model expects {self.model.input_dim}")
        _check_reps(self.reps)


@dataclass(frozen=True)
class MacTable:
    """Per-sample multiply-accumulate counts for every stage of the graph."""
    encoder: Tuple[int, ...]
    heads: Tuple[int, ...]
    decoder: int

    @property
    def full(self) -> int:
        return sum(self.encoder) + self.decoder


@dataclass(frozen=True, eq=False)
class CandidateResult:
    objectives: ObjectiveVector
    policy: ExitPolicy
    trace: ExitTrace = field(repr=False)
    view: Optional[clipping.MaskedModel] = field(default=None, repr=False)

    @property
    def timed(self) -> bool:
        return not np.isnan(self.objectives.runtime_s)


# ---------- classification quality ----------
def confusion(y_true: Sequence[int], y_pred: Sequence[int]) -> ConfusionCounts:
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if t.shape != p.shape:
        raise ContractError(f"{t.shape[0]} labels against {p.shape[0]} predictions")
    if t.size == 0:
        return ConfusionCounts(0, 0, 0, 0)
    tn, fp, fn, tp = metrics.confusion_matrix(t.astype(np.int8), p.astype(np.int8), labels=[0, 1]).ravel()
    return ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def f1_score(c: ConfusionCounts) -> float:
    """Anomaly-class F1; 0 when there is neither a true nor a predicted anomaly."""
    if c.tp + c.fp + c.fn == 0:
        return 0.0
    y_true = np.repeat(np.array([1, 0, 0, 1], dtype=np.int8), [c.tp, c.fp, c.tn, c.fn])
    y_pred = np.repeat(np.array([1, 1, 0, 0], dtype=np.int8), [c.tp, c.fp, c.tn, c.fn])
    return float(metrics.f1_score(y_true, y_pred, pos_label=1, zero_division=0))


# ---------- storage / power ----------
def storage_ratio(model: SaeModel, mask: ClipMask) -> float:
    return clipping.retained_parameter_count(model, mask) / model.parameter_count()


def mac_counts(model: SaeModel, mask: Optional[ClipMask] = None) -> MacTable:
    kept = (mask or ClipMask.identity(model)).check(model).kept_counts
    dims = (model.input_dim,) + kept
    L = model.depth
    encoder = tuple(dims[k + 1] * dims[k] for k in range(L))
    heads = tuple(model.input_dim * dims[k + 1] for k in range(L - 1))
    decoder = sum(dims[k] * dims[k + 1] for k in range(L))
    return MacTable(encoder, heads, decoder)


def power_ratio(model: SaeModel, mask: ClipMask, trace: ExitTrace) -> float:
    """
    Mean MACs along each sample's actual path over the unmasked encoder plus
    decoder. A sample leaving at exit k paid for encoder layers 1..k and every
    enabled head up to k; one reaching the end also paid for the decoder.

    Enabled heads add cost, so an unclipped policy whose early exits rarely
    fire scores above 1.
    """
    if trace.depth != model.depth:
        raise ContractError(f"trace has {trace.depth} exits, model has {model.depth}")
    if trace.n == 0:
        raise ContractError("empty trace")
    L = model.depth
    table = mac_counts(model, mask)

    enc_cum = np.concatenate([[0], np.cumsum(table.encoder)])
    head_cost = np.array([h if on else 0 for h, on in zip(table.heads, trace.early_enabled)] + [0])
    head_cum = np.concatenate([[0], np.cumsum(head_cost)])

    e = trace.exit_index
    per_sample = enc_cum[e] + head_cum[np.minimum(e, L - 1)] + np.where(e == L, table.decoder, 0)
    return float(per_sample.mean()) / mac_counts(model).full


# ---------- runtime ----------
def _check_reps(reps: int) -> None:
    if reps < 3 or reps % 2 == 0:
        raise ContractError(f"timing repetitions must be odd and >= 3, got {reps}")


def measure_runtime(model: clipping.ModelView, policy: ExitPolicy, d: Dataset, reps: int = DEFAULT_TIMING_REPS) -> float:
    """
    Median wall time of `reps` full passes over `d`. Two timing sections never
    overlap; callers keep other inference work off the machine while this runs.
    """
    _check_reps(reps)
    samples = []
    with _TIMING_LOCK:
        for _ in range(reps):
            t0 = time.perf_counter()
            exits.infer_with_exits(model, policy, d)
            samples.append(time.perf_counter() - t0)
    return float(sorted(samples)[reps // 2])


# ---------- candidates ----------
def score_candidate(ctx: EvalContext, mask: ClipMask, quantiles: Sequence[Optional[float]]) -> CandidateResult:
    """Every objective except runtime, which stays NaN until `with_runtime`. Safe to run concurrently."""
    view = clipping.apply_mask(ctx.model, mask)
    policy = exits.calibrate_exit_thresholds(view, ctx.calib_set, quantiles)
    labels, trace = exits.infer_with_exits(view, policy, ctx.eval_set)
    vec = ObjectiveVector(
        f1=f1_score(confusion(ctx.eval_set.labels, labels)),
        runtime_s=float("nan"),
        storage_ratio=storage_ratio(ctx.model, mask),
        power_ratio=power_ratio(ctx.model, mask, trace),
    )
    return CandidateResult(vec, policy, trace, view)


def with_runtime(ctx: EvalContext, result: CandidateResult) -> CandidateResult:
    if result.view is None:
        raise ContractError("candidate result carries no model view to time")
    runtime = measure_runtime(result.view, result.policy, ctx.eval_set, ctx.reps)
    timed = replace(result, objectives=replace(result.objectives, runtime_s=runtime))
    logger.debug("candidate kept=%s q=%s -> %s", result.view.mask.kept_counts, result.policy.quantiles, timed.objectives)
    return timed


def evaluate_candidate_detail(ctx: EvalContext, mask: ClipMask, quantiles: Sequence[Optional[float]]) -> CandidateResult:
    return with_runtime(ctx, score_candidate(ctx, mask, quantiles))


def evaluate_candidate(ctx: EvalContext, mask: ClipMask, quantiles: Sequence[Optional[float]]) -> ObjectiveVector:
    return evaluate_candidate_detail(ctx, mask, quantiles).objectives


def baseline(ctx: EvalContext) -> ObjectiveVector:
    """The unclipped model without early exits."""
    return evaluate_candidate(
        ctx, ClipMask.identity(ctx.model), exits.disabled_quantiles(ctx.model.depth, ctx.final_quantile)
    )


# ---------- correlation ----------
def correlation(x: Sequence[float], y: Sequence[float], method: str = "pearson") -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractError(f"correlation needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ContractError(f"correlation needs at least 3 points, got {x.size}")
    if method not in ("pearson", "spearman"):
        raise ContractError(f"unknown correlation method {method!r}")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant input")
    res = stats.pearsonr(x, y) if method == "pearson" else stats.spearmanr(x, y)
    r = float(res.statistic)
    if not np.isfinite(r):
        raise UndefinedCorrelationError(f"{method} correlation came out {r}")
    return float(np.clip(r, -1.0, 1.0))
