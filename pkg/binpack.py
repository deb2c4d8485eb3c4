# binpack.py — equal-width binning codec for model updates
# MOSU wire format, compression-rate accounting, perturbation error-bound check

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from errors import (
    BadMagicError,
    ContractError,
    IndexOutOfRangeError,
    PayloadError,
    SingularMatrixError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from linalg import as_matrix, as_vector, condition_number_2, lu_solve, spectral_norm, vector_norm
from sae import SaeConfig, SaeModel, model_from_matrices

# ----------------- tunables -----------------
PAYLOAD_MAGIC = b"MOSU"
PAYLOAD_VERSION = 1
BOUND_TOL = 1e-9
REFERENCE_RATES = {"reported_at_density_100": 0.1108, "reported_in_summary": 0.118}
# --------------------------------------------

_HEADER = struct.Struct("<4sBI")        # magic, version, matrix count
_MATRIX = struct.Struct("<IIIdd")       # rows, cols, density, base, step


# ===== Data classes =====
@dataclass(frozen=True)
class BinningParams:
    base: float
    step: float
    density: int


@dataclass(frozen=True, eq=False)
class PackedMatrix:
    rows: int
    cols: int
    params: BinningParams
    indices: np.ndarray         # flat, row-major

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def bits_per_index(self) -> int:
        return index_bits(self.params.density)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedMatrix):
            return NotImplemented
        return (self.rows, self.cols, self.params) == (other.rows, other.cols, other.params) and \
            np.array_equal(self.indices, other.indices)


@dataclass(frozen=True)
class ErrorBoundReport:
    density: int
    norm_dA: float
    norm_x_plus_dx: float
    norm_dx: float
    norm_A: float
    lhs: float
    cond: float
    holds: bool

    @property
    def ratio(self) -> float:
        return self.lhs / self.cond if self.cond else float("inf")


# ---------- codec ----------
def index_bits(density: int) -> int:
    """ceil(log2(density)) bits per bin index on the wire."""
    return (int(density) - 1).bit_length()


def _check_density(d: int) -> int:
    if int(d) != d or d < 2:
        raise ContractError(f"bin density must be an integer >= 2, got {d}")
    return int(d)


def bin_encode(m, d_x: int) -> PackedMatrix:
    """Equal-width bins over [min, max]; the maximum is clamped into the top bin."""
    d_x = _check_density(d_x)
    a = as_matrix(m)
    base = float(a.min())
    step = (float(a.max()) - base) / d_x
    if step == 0.0:
        idx = np.zeros(a.size, dtype=np.uint32)
    else:
        idx = np.clip(np.floor((a.reshape(-1) - base) / step), 0, d_x - 1).astype(np.uint32)
    return PackedMatrix(a.shape[0], a.shape[1], BinningParams(base, step, d_x), idx)


def bin_decode(p: PackedMatrix) -> np.ndarray:
    """Bin-center reconstruction."""
    idx = np.asarray(p.indices)
    if idx.size != p.n:
        raise PayloadError(f"{idx.size} indices for a {p.rows}x{p.cols} matrix")
    if idx.size and int(idx.max()) >= p.params.density:
        raise IndexOutOfRangeError(f"bin index {int(idx.max())} >= density {p.params.density}")
    if p.params.step == 0.0:
        return np.full((p.rows, p.cols), p.params.base)
    return (p.params.base + (idx.astype(np.float64) + 0.5) * p.params.step).reshape(p.rows, p.cols)


def compression_rate(d_x: int, n: int) -> float:
    """((log2(d_x) / 8) * N + 2 * 8) / (8 * N) with exact log2."""
    d_x = _check_density(d_x)
    if n < 1:
        raise ContractError(f"parameter count must be >= 1, got {n}")
    return ((math.log2(d_x) / 8.0) * n + 16.0) / (8.0 * n)


# ---------- wire format ----------
def _pack_indices(idx: np.ndarray, bits: int) -> bytes:
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    planes = ((idx.astype(np.uint32)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(planes.reshape(-1)).tobytes()


def _unpack_indices(blob: bytes, count: int, bits: int) -> np.ndarray:
    planes = np.unpackbits(np.frombuffer(blob, dtype=np.uint8))[:count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.uint32))
    return (planes.astype(np.uint32) * weights).sum(axis=1).astype(np.uint32)


def pack_payload(matrices: Sequence[PackedMatrix]) -> bytes:
    if not matrices:
        raise ContractError("nothing to pack")
    parts = [_HEADER.pack(PAYLOAD_MAGIC, PAYLOAD_VERSION, len(matrices))]
    for p in matrices:
        parts.append(_MATRIX.pack(p.rows, p.cols, p.params.density, p.params.base, p.params.step))
        parts.append(_pack_indices(np.asarray(p.indices), p.bits_per_index))
    return b"".join(parts)


def unpack_payload(blob: bytes) -> List[PackedMatrix]:
    blob = bytes(blob)
    pos = 0

    def take(size: int, what: str) -> bytes:
        nonlocal pos
        if pos + size > len(blob):
            raise TruncatedPayloadError(f"payload ends at byte {len(blob)} inside {what} (needs {pos + size})")
        chunk = blob[pos:pos + size]
        pos += size
        return chunk

    if len(blob) < 4 or blob[:4] != PAYLOAD_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {PAYLOAD_MAGIC!r}")
    magic, version, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if version != PAYLOAD_VERSION:
        raise UnsupportedVersionError(f"payload version {version}, this build reads {PAYLOAD_VERSION}")

    out = []
    for k in range(count):
        rows, cols, density, base, step = _MATRIX.unpack(take(_MATRIX.size, f"matrix {k} header"))
        if density < 2:
            raise PayloadError(f"matrix {k}: density {density} < 2")
        bits = index_bits(density)
        idx = _unpack_indices(take((rows * cols * bits + 7) // 8, f"matrix {k} indices"), rows * cols, bits)
        if idx.size and int(idx.max()) >= density:
            raise IndexOutOfRangeError(f"matrix {k}: bin index {int(idx.max())} >= density {density}")
        out.append(PackedMatrix(rows, cols, BinningParams(base, step, density), idx))
    if pos != len(blob):
        raise PayloadError(f"{len(blob) - pos} trailing bytes after {count} matrices")
    return out


# ---------- whole models ----------
def model_matrices(model: SaeModel) -> List[np.ndarray]:
    """Weights as stored, biases as 1 x n rows, in declaration order."""
    return [p.reshape(1, -1) if p.ndim == 1 else p for _, p in model.named_matrices()]


def pack_model(model: SaeModel, d_x: int) -> List[PackedMatrix]:
    return [bin_encode(m, d_x) for m in model_matrices(model)]


def unpack_model(packed: Sequence[PackedMatrix], template: SaeConfig) -> SaeModel:
    return model_from_matrices([bin_decode(p) for p in packed], template)


def payload_report(packed: Sequence[PackedMatrix], wire_bytes: int) -> dict:
    n = sum(p.n for p in packed)
    density = packed[0].params.density
    raw = 8 * n
    return {
        "density": density,
        "parameters": n,
        "matrices": len(packed),
        "formula_rate": compression_rate(density, n),
        "asymptotic_rate": math.log2(density) / 64.0,
        "bits_per_index": index_bits(density),
        "wire_bytes": wire_bytes,
        "raw_bytes": raw,
        "wire_ratio": wire_bytes / raw,
        "max_step": max(p.params.step for p in packed),
        "reference_rates": dict(REFERENCE_RATES),
    }


# ---------- error bound ----------
def verify_error_bound(a, d_x: int, x) -> ErrorBoundReport:
    """
    Perturb A by its binning error dA, solve (A + dA)(x + dx) = A x and check
    ||dx|| ||A|| / (||x + dx|| ||dA||) <= ||A|| ||A^-1||.
    """
    a = as_matrix(a, "A")
    x = as_vector(x, "x")
    if a.shape[0] != a.shape[1] or x.shape[0] != a.shape[0]:
        raise ContractError(f"need square A matching x, got {a.shape} and {x.shape}")
    d_a = bin_decode(bin_encode(a, d_x)) - a
    if not np.any(d_a):
        raise ContractError("binning left A unchanged; the bound is vacuous")

    cond = condition_number_2(a)
    try:
        x_plus = lu_solve(a + d_a, a @ x)
    except SingularMatrixError as e:
        raise SingularMatrixError(f"A + dA is singular at density {d_x}: {e}") from e

    dx = x_plus - x
    norm_a, norm_da = spectral_norm(a), spectral_norm(d_a)
    norm_dx, norm_xp = vector_norm(dx), vector_norm(x_plus)
    lhs = (norm_dx * norm_a) / (norm_xp * norm_da) if norm_xp > 0 else float("inf")
    return ErrorBoundReport(
        density=int(d_x), norm_dA=norm_da, norm_x_plus_dx=norm_xp, norm_dx=norm_dx, norm_A=norm_a,
        lhs=lhs, cond=cond, holds=bool(lhs <= cond + BOUND_TOL),
    )


def random_well_conditioned(n: int, rng: np.random.Generator) -> np.ndarray:
    """Diagonally dominant test matrix."""
    a = rng.uniform(-1.0, 1.0, size=(n, n))
    return a + n * np.eye(n)
