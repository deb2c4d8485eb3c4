# clipping.py — neuron-level clip masks, masked inference views, progressive clipping schedules

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

import sae
from data import Dataset
from errors import ContractError
from sae import SaeModel

# ----------------- tunables -----------------
DEFAULT_STEP_FRAC = 0.05   # fraction of each layer pruned per progressive round
_COUNT_EPS = 1e-9
# --------------------------------------------

ModelShape = Union[SaeModel, Sequence[int]]


def hidden_widths(shape: ModelShape) -> Tuple[int, ...]:
    if isinstance(shape, SaeModel):
        return shape.widths
    widths = tuple(int(w) for w in shape)
    if not widths or any(w < 1 for w in widths):
        raise ContractError(f"hidden widths must be positive, got {widths}")
    return widths


# ===== Data classes =====
@dataclass(frozen=True, eq=False)
class ClipMask:
    keep: Tuple[np.ndarray, ...]    # per hidden layer, bool, True = keep

    def __post_init__(self):
        keep = tuple(np.array(k, dtype=bool).reshape(-1) for k in self.keep)
        if not keep:
            raise ContractError("a clip mask needs at least one hidden layer")
        for k, bits in enumerate(keep):
            if not bits.any():
                raise ContractError(f"clip mask prunes every neuron of hidden layer {k + 1}")
            bits.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @classmethod
    def identity(cls, shape: ModelShape) -> "ClipMask":
        return cls(tuple(np.ones(w, dtype=bool) for w in hidden_widths(shape)))

    @classmethod
    def from_bits(cls, bits: Sequence[int], shape: ModelShape) -> "ClipMask":
        widths = hidden_widths(shape)
        bits = np.asarray(bits).astype(bool)
        if bits.size != sum(widths):
            raise ContractError(f"{bits.size} clip bits for {sum(widths)} hidden neurons")
        return cls(tuple(np.split(bits, np.cumsum(widths)[:-1])))

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(int(k.size) for k in self.keep)

    @property
    def kept_counts(self) -> Tuple[int, ...]:
        return tuple(int(k.sum()) for k in self.keep)

    @property
    def is_identity(self) -> bool:
        return all(k.all() for k in self.keep)

    def bits(self) -> np.ndarray:
        """Layer-major 0/1 vector."""
        return np.concatenate(self.keep).astype(np.uint8)

    def multipliers(self) -> Tuple[np.ndarray, ...]:
        return tuple(k.astype(np.float64) for k in self.keep)

    def prunes_superset_of(self, other: "ClipMask") -> bool:
        if self.widths != other.widths:
            return False
        return all(bool(np.all(~theirs <= ~mine)) for mine, theirs in zip(self.keep, other.keep))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClipMask):
            return NotImplemented
        return self.widths == other.widths and all(np.array_equal(a, b) for a, b in zip(self.keep, other.keep))

    def __hash__(self) -> int:
        return hash((self.widths, np.packbits(self.bits()).tobytes()))

    def check(self, shape: ModelShape) -> "ClipMask":
        if self.widths != hidden_widths(shape):
            raise ContractError(f"mask widths {self.widths} do not match model widths {hidden_widths(shape)}")
        return self


@dataclass(frozen=True)
class ClipSchedule:
    masks: Tuple[ClipMask, ...]
    step_frac: float
    seed: int

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)


@dataclass(frozen=True, eq=False)
class MaskedModel:
    """Read-only inference view: pruned activations are forced to zero on every exit path."""
    model: SaeModel
    mask: ClipMask

    @property
    def keep(self) -> Optional[Tuple[torch.Tensor, ...]]:
        return None if self.mask.is_identity else sae.keep_tensors(self.mask.multipliers())

    @property
    def depth(self) -> int:
        return self.model.depth

    @property
    def input_dim(self) -> int:
        return self.model.input_dim

    def reconstruct(self, x: np.ndarray, exit: Optional[int] = None) -> np.ndarray:
        return sae.reconstruct(self.model, x, self.depth if exit is None else exit, self.keep)

    def errors(self, d: Union[Dataset, np.ndarray], exit: Optional[int] = None) -> np.ndarray:
        return sae.reconstruction_errors(self.model, d, exit, self.keep)


ModelView = Union[SaeModel, MaskedModel]


def as_view(m: ModelView) -> MaskedModel:
    return m if isinstance(m, MaskedModel) else MaskedModel(m, ClipMask.identity(m))


# ---------- sampling ----------
def _keep_count(frac: float, width: int) -> int:
    return math.ceil(frac * width - _COUNT_EPS)


def sample_mask(shape: ModelShape, keep_frac: float, seed: int) -> ClipMask:
    """Per layer, keep ceil(keep_frac * width) neurons drawn uniformly without replacement."""
    if not 0.0 < keep_frac <= 1.0:
        raise ContractError(f"keep_frac must lie in (0, 1], got {keep_frac}")
    rng = np.random.default_rng(seed)
    keep = []
    for k, w in enumerate(hidden_widths(shape)):
        n_keep = _keep_count(keep_frac, w)
        if n_keep < 1:
            raise ContractError(f"keep_frac {keep_frac} leaves hidden layer {k + 1} (width {w}) empty")
        bits = np.zeros(w, dtype=bool)
        bits[rng.choice(w, size=n_keep, replace=False)] = True
        keep.append(bits)
    return ClipMask(tuple(keep))


def progressive_schedule(shape: ModelShape, step_frac: float = DEFAULT_STEP_FRAC, seed: int = 0) -> ClipSchedule:
    """
    Cumulative clipping: every round prunes ceil(step_frac * width) more of
    each layer's still-kept neurons, chosen at random. Stops before any
    layer would lose its last neuron.
    """
    if not 0.0 < step_frac <= 0.5:
        raise ContractError(f"step_frac must lie in (0, 0.5], got {step_frac}")
    widths = hidden_widths(shape)
    per_round = [max(1, _keep_count(step_frac, w)) for w in widths]
    rng = np.random.default_rng(seed)

    keep = [np.ones(w, dtype=bool) for w in widths]
    masks = []
    while all(int(k.sum()) - c >= 1 for k, c in zip(keep, per_round)):
        for k, c in zip(keep, per_round):
            k[rng.choice(np.flatnonzero(k), size=c, replace=False)] = False
        masks.append(ClipMask(tuple(k.copy() for k in keep)))
    return ClipSchedule(tuple(masks), step_frac, seed)


# ---------- views and accounting ----------
def apply_mask(model: SaeModel, mask: ClipMask) -> MaskedModel:
    return MaskedModel(model, mask.check(model))


def retained_fraction(mask: ClipMask) -> float:
    return sum(mask.kept_counts) / sum(mask.widths)


def retained_parameter_count(model: SaeModel, mask: ClipMask) -> int:
    """Parameters left once pruned rows, columns, decoder mirrors and head slices are deleted."""
    cfg = replace(model.config, encoder_widths=mask.check(model).kept_counts)
    enc, dec, heads = sae.layer_shapes(cfg)
    return sum(o * i + o for o, i in enc + dec + heads)


def shrink_model(model: SaeModel, mask: ClipMask) -> SaeModel:
    """Physically delete pruned neurons. Inference matches the masked view."""
    mask.check(model)
    L = model.depth
    idx = [np.flatnonzero(k) for k in mask.keep]

    def arrays(layer):
        return layer.weight.detach().numpy(), layer.bias.detach().numpy()

    encoder = []
    for k, layer in enumerate(model.encoder):
        w, b = arrays(layer)
        w = w[idx[k]]
        if k > 0:
            w = w[:, idx[k - 1]]
        encoder.append(sae.linear_layer(w, b[idx[k]]))

    decoder = []
    for j, layer in enumerate(model.decoder):
        w, b = arrays(layer)
        w = w[:, idx[L - 1 - j]]
        mirror = sae.decoder_mirror(L, j)
        if mirror is not None:
            w, b = w[idx[mirror]], b[idx[mirror]]
        decoder.append(sae.linear_layer(w, b))

    heads = []
    for k, layer in enumerate(model.heads):
        w, b = arrays(layer)
        heads.append(sae.linear_layer(w[:, idx[k]], b))
    cfg = replace(model.config, encoder_widths=mask.kept_counts)
    return SaeModel(cfg, encoder, decoder, heads)
