# moga.py — multi-objective genetic search over clip masks and exit quantiles
# Genome codec, Pareto dominance, fast non-dominated sort, rank-weighted selection, evolutionary loop

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import exits
import objectives
from clipping import ClipMask, ModelShape, hidden_widths
from errors import ContractError
from objectives import EvalContext, ObjectiveVector

logger = logging.getLogger(__name__)

# ----------------- tunables -----------------
PATTERN_BITS = 32                      # one IEEE 754 single per exit quantile
REPAIR_QUANTILE = 0.5                  # NaN / infinite patterns decode to this
CHOSEN_STORAGE_CAP = 0.5
CHOSEN_POWER_CAP = 0.5
INIT_KEEP_RANGE = (0.2, 1.0)           # per-individual keep probability of the initial population
INIT_EARLY_Q_RANGE = (0.5, 1.0)
INIT_FINAL_Q_RANGE = (0.9, 1.0)
MODES = ("clip", "exit", "joint")
# --------------------------------------------

Objectives = Union[ObjectiveVector, Sequence[float]]


# ===== Data classes =====
@dataclass(frozen=True, eq=False)
class Genome:
    bits: np.ndarray        # clip segment then one 32-bit pattern per exit, MSB first
    n_clip: int

    def __post_init__(self):
        bits = np.array(self.bits, dtype=np.uint8).reshape(-1)
        if np.any(bits > 1):
            raise ContractError("genome bits must be 0 or 1")
        if not 0 < self.n_clip < bits.size or (bits.size - self.n_clip) % PATTERN_BITS:
            raise ContractError(f"{bits.size} genome bits do not split into {self.n_clip} clip bits plus 32-bit patterns")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_parts(cls, clip_bits: Sequence[int], quantiles: Sequence[float]) -> "Genome":
        patterns = np.unpackbits(np.asarray(quantiles, dtype=">f4").view(np.uint8))
        clip = np.asarray(clip_bits, dtype=np.uint8)
        return cls(np.concatenate([clip, patterns]), clip.size)

    @property
    def clip_bits(self) -> np.ndarray:
        return self.bits[:self.n_clip]

    @property
    def exit_bits(self) -> np.ndarray:
        return self.bits[self.n_clip:]

    @property
    def n_exits(self) -> int:
        return (self.bits.size - self.n_clip) // PATTERN_BITS

    def raw_quantiles(self) -> np.ndarray:
        packed = np.packbits(self.exit_bits.reshape(-1, PATTERN_BITS), axis=1)
        with np.errstate(invalid="ignore"):
            return np.ascontiguousarray(packed).reshape(-1).view(">f4").astype(np.float64)

    def hex(self) -> str:
        return f"{self.n_clip}:" + np.packbits(self.bits).tobytes().hex()

    def key(self) -> Tuple[int, int, bytes]:
        return (self.bits.size, self.n_clip, np.packbits(self.bits).tobytes())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Genome):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


@dataclass(frozen=True)
class FrontSet:
    fronts: Tuple[Tuple[int, ...], ...]    # F_1..F_k, member indices ascending
    rank: Tuple[int, ...]                  # 1-based front number per individual

    @property
    def first(self) -> Tuple[int, ...]:
        return self.fronts[0]


@dataclass(frozen=True)
class GaConfig:
    population: int = 40
    generations: int = 30
    crossover: float = 0.9
    mutation: Optional[float] = None       # per bit; None means 1 / genome length
    elitism: int = 2
    seed: int = 0
    workers: int = 4

    def validate(self) -> "GaConfig":
        if self.population < 4 or self.population % 2:
            raise ContractError(f"population must be even and >= 4, got {self.population}")
        if self.generations < 0:
            raise ContractError(f"generations must be >= 0, got {self.generations}")
        if not 0.0 <= self.crossover <= 1.0:
            raise ContractError(f"crossover rate must lie in [0, 1], got {self.crossover}")
        if self.mutation is not None and not 0.0 <= self.mutation <= 1.0:
            raise ContractError(f"mutation rate must lie in [0, 1], got {self.mutation}")
        if not 0 <= self.elitism <= self.population:
            raise ContractError(f"elitism must lie in [0, population], got {self.elitism}")
        if self.workers < 1:
            raise ContractError(f"workers must be >= 1, got {self.workers}")
        return self

    def mutation_rate(self, genome_bits: int) -> float:
        return 1.0 / genome_bits if self.mutation is None else self.mutation


@dataclass(eq=False)
class ArchiveEntry:
    generation: int
    genome: Genome
    mask: ClipMask
    quantiles: Tuple[Optional[float], ...]
    objectives: ObjectiveVector
    rank: int = 0

    def to_row(self) -> dict:
        return {
            "generation": self.generation,
            "genome_hex": self.genome.hex(),
            **self.objectives.to_dict(),
            "kept_neurons": sum(self.mask.kept_counts),
            "quantiles": ";".join("off" if q is None else f"{q:.6g}" for q in self.quantiles),
            "front_rank": self.rank,
        }


@dataclass(eq=False)
class OptimizerResult:
    fronts: FrontSet                         # sorted over the whole archive
    archive: List[ArchiveEntry] = field(default_factory=list)

    @property
    def front(self) -> List[ArchiveEntry]:
        return [self.archive[i] for i in self.fronts.first]


# ---------- genome codec ----------
def genome_length(shape: ModelShape) -> int:
    widths = hidden_widths(shape)
    return sum(widths) + PATTERN_BITS * len(widths)


def decode_genome(g: Genome, shape: ModelShape) -> Tuple[ClipMask, List[float]]:
    """
    Clip bits sliced per layer (an all-zero layer keeps its highest-index
    neuron); quantile patterns read as float32, NaN/inf -> 0.5, else clamped
    to [0, 1].
    """
    widths = hidden_widths(shape)
    if g.n_clip != sum(widths) or g.n_exits != len(widths):
        raise ContractError(
            f"genome has {g.n_clip} clip bits / {g.n_exits} exits, model needs {sum(widths)} / {len(widths)}"
        )
    layers = np.split(g.clip_bits.astype(bool), np.cumsum(widths)[:-1])
    repaired = []
    for bits in layers:
        bits = bits.copy()
        if not bits.any():
            bits[-1] = True
        repaired.append(bits)

    q = g.raw_quantiles()
    with np.errstate(invalid="ignore"):
        q = np.where(np.isfinite(q), np.clip(q, 0.0, 1.0), REPAIR_QUANTILE)
    return ClipMask(tuple(repaired)), [float(v) for v in q]


# ---------- dominance and sorting ----------
def _as_min(o: Objectives) -> Tuple[float, ...]:
    return o.minimization() if isinstance(o, ObjectiveVector) else tuple(float(v) for v in o)


def dominates(a: Objectives, b: Objectives) -> bool:
    a, b = _as_min(a), _as_min(b)
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(objs: Sequence[Objectives]) -> FrontSet:
    """S_p / n_p bookkeeping, then fronts peeled by decrementing domination counters."""
    if not objs:
        raise ContractError("cannot sort an empty population")
    pts = np.array([_as_min(o) for o in objs], dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ContractError("objectives must be finite")
    n = pts.shape[0]

    # le[p, q]: p <= q everywhere; lt[p, q]: p < q somewhere
    le = np.all(pts[:, None, :] <= pts[None, :, :], axis=2)
    lt = np.any(pts[:, None, :] < pts[None, :, :], axis=2)
    dom = le & lt                                  # dom[p, q]: p dominates q

    S = [np.flatnonzero(dom[p]) for p in range(n)]
    n_dom = dom.sum(axis=0).astype(np.int64)

    rank = np.zeros(n, dtype=np.int64)
    current = [p for p in range(n) if n_dom[p] == 0]
    fronts = []
    i = 1
    while current:
        fronts.append(tuple(sorted(current)))
        for p in current:
            rank[p] = i
        nxt = []
        for p in current:
            for q in S[p]:
                n_dom[q] -= 1
                if n_dom[q] == 0:
                    nxt.append(int(q))
        current = nxt
        i += 1
    return FrontSet(tuple(fronts), tuple(int(r) for r in rank))


def selection_probabilities(fronts: FrontSet) -> np.ndarray:
    """Front-i members weigh 1/i, normalized by sum_j count(F_j)/j."""
    if not fronts.fronts:
        raise ContractError("no fronts")
    w = 1.0 / np.asarray(fronts.rank, dtype=np.float64)
    return w / w.sum()


# ---------- evolution ----------
def _segment_crossover(a: np.ndarray, b: np.ndarray, start: int, stop: int, rng: np.random.Generator) -> None:
    if stop - start < 2:
        return
    cut = int(rng.integers(start + 1, stop))
    tail = a[cut:stop].copy()
    a[cut:stop] = b[cut:stop]
    b[cut:stop] = tail


def evolve_step(pop: Sequence[Genome], objs: Sequence[Objectives], cfg: GaConfig,
                rng: np.random.Generator) -> List[Genome]:
    """
    Elites (lowest ranks, ties by index) pass unchanged; the rest are bred from
    roulette-selected parents with per-segment single-point crossover and
    per-bit mutation.
    """
    n = len(pop)
    if n != cfg.population or len(objs) != n:
        raise ContractError(f"population of {n} with {len(objs)} objective vectors, config expects {cfg.population}")
    fronts = fast_nondominated_sort(objs)
    probs = selection_probabilities(fronts)

    elite = sorted(np.argsort(np.asarray(fronts.rank), kind="stable")[:cfg.elitism].tolist())
    children: List[Genome] = [pop[i] for i in elite]

    n_clip = pop[0].n_clip
    total = pop[0].bits.size
    rate = cfg.mutation_rate(total)
    while len(children) < n:
        i, j = rng.choice(n, size=2, p=probs)
        a, b = pop[i].bits.copy(), pop[j].bits.copy()
        if rng.random() < cfg.crossover:
            _segment_crossover(a, b, 0, n_clip, rng)
        if rng.random() < cfg.crossover:
            _segment_crossover(a, b, n_clip, total, rng)
        for child in (a, b):
            child ^= (rng.random(total) < rate).astype(np.uint8)
            if len(children) < n:
                children.append(Genome(child, n_clip))
    return children


# ---------- optimizer ----------
def _mode_candidate(g: Genome, ctx: EvalContext, mode: str) -> Tuple[ClipMask, Tuple[Optional[float], ...]]:
    mask, q = decode_genome(g, ctx.model)
    if mode == "clip":
        return mask, exits.disabled_quantiles(ctx.model.depth, ctx.final_quantile)
    if mode == "exit":
        return ClipMask.identity(ctx.model), tuple(q)
    return mask, tuple(q)


def _freeze(g: Genome, ctx: EvalContext, mode: str) -> Genome:
    """Reset the segment a mode does not search to its fixed value."""
    L = ctx.model.depth
    if mode == "clip":
        return Genome.from_parts(g.clip_bits, [ctx.final_quantile] * L)
    if mode == "exit":
        return Genome(np.concatenate([np.ones(g.n_clip, dtype=np.uint8), g.exit_bits]), g.n_clip)
    return g


def initial_population(ctx: EvalContext, cfg: GaConfig, mode: str) -> List[Genome]:
    """Individual 0 is the unclipped model with near-silent early exits; the rest are random."""
    widths = ctx.model.widths
    n_clip, L = sum(widths), len(widths)
    pop = [Genome.from_parts(np.ones(n_clip, dtype=np.uint8), [0.0] * (L - 1) + [ctx.final_quantile])]
    for idx in range(1, cfg.population):
        rng = np.random.default_rng([cfg.seed, 0, idx])
        keep_p = rng.uniform(*INIT_KEEP_RANGE)
        clip = (rng.random(n_clip) < keep_p).astype(np.uint8)
        q = list(rng.uniform(*INIT_EARLY_Q_RANGE, size=L - 1)) + [rng.uniform(*INIT_FINAL_Q_RANGE)]
        pop.append(Genome.from_parts(clip, q))
    return [_freeze(g, ctx, mode) for g in pop]


def run_optimizer(ctx: EvalContext, cfg: GaConfig, mode: str = "joint",
                  on_generation: Optional[Callable[[int, List[ArchiveEntry]], None]] = None) -> OptimizerResult:
    """
    Seeded evolutionary search. Each distinct genome is evaluated once and
    archived. The worker pool scores candidates; the calling thread then times
    them one at a time so no other inference shares the clock. The returned
    front is the first front of the whole archive.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    cfg.validate()

    cache: Dict[Tuple, ArchiveEntry] = {}
    archive: List[ArchiveEntry] = []

    def evaluate(pop: List[Genome], generation: int) -> List[ObjectiveVector]:
        fresh, seen = [], set(cache)
        for g in pop:
            if g.key() not in seen:
                seen.add(g.key())
                fresh.append(g)

        def job(g: Genome) -> Tuple[ClipMask, Tuple[Optional[float], ...], objectives.CandidateResult]:
            mask, q = _mode_candidate(g, ctx, mode)
            return mask, q, objectives.score_candidate(ctx, mask, q)

        scored: Dict[int, Tuple] = {}
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            futs = {ex.submit(job, g): i for i, g in enumerate(fresh)}
            for fut in as_completed(futs):
                scored[futs[fut]] = fut.result()

        # timing runs on this thread once the pool has drained
        for i, g in enumerate(fresh):
            mask, q, res = scored[i]
            entry = ArchiveEntry(generation, g, mask, q, objectives.with_runtime(ctx, res).objectives)
            cache[g.key()] = entry
            archive.append(entry)
        return [cache[g.key()].objectives for g in pop]

    pop = initial_population(ctx, cfg, mode)
    objs = evaluate(pop, 0)
    _log_generation(0, [cache[g.key()] for g in pop])
    if on_generation:
        on_generation(0, [cache[g.key()] for g in pop])

    for gen in range(1, cfg.generations + 1):
        rng = np.random.default_rng([cfg.seed, gen])
        pop = [_freeze(g, ctx, mode) for g in evolve_step(pop, objs, cfg, rng)]
        objs = evaluate(pop, gen)
        _log_generation(gen, [cache[g.key()] for g in pop])
        if on_generation:
            on_generation(gen, [cache[g.key()] for g in pop])

    fronts = fast_nondominated_sort([e.objectives for e in archive])
    for entry, r in zip(archive, fronts.rank):
        entry.rank = r
    logger.info("search done: %d candidates archived, %d on the first front", len(archive), len(fronts.first))
    return OptimizerResult(fronts, archive)


def _log_generation(gen: int, entries: List[ArchiveEntry]) -> None:
    best = max(entries, key=lambda e: e.objectives.f1)
    logger.info(
        "generation %d: best f1 %.4f (storage %.3f, power %.3f), min power %.3f",
        gen, best.objectives.f1, best.objectives.storage_ratio, best.objectives.power_ratio,
        min(e.objectives.power_ratio for e in entries),
    )


def chosen_candidate(front: Sequence[ArchiveEntry]) -> ArchiveEntry:
    """Highest F1 within the storage and power caps, else highest F1 overall."""
    if not front:
        raise ContractError("empty front")
    capped = [e for e in front
              if e.objectives.storage_ratio <= CHOSEN_STORAGE_CAP and e.objectives.power_ratio <= CHOSEN_POWER_CAP]
    pool = capped or list(front)
    return max(pool, key=lambda e: e.objectives.f1)
