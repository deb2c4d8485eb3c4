# sae.py — stacked autoencoder with one affine reconstruction head per encoder layer
# torch modules in float64: joint-loss training, masked forward passes, per-sample errors, MOSM checkpoints

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from data import Dataset
from errors import CheckpointError, ContractError, DivergenceError

logger = logging.getLogger(__name__)

# ----------------- tunables -----------------
CHECKPOINT_MAGIC = b"MOSM"
CHECKPOINT_VERSION = 1
LOG_EVERY_EPOCHS = 10
QUANTILE_EPS = 1e-9        # absorbs q*n landing a hair above an integer
DTYPE = torch.float64
INIT_STREAM, SHUFFLE_STREAM = 0, 1
# --------------------------------------------

# per hidden layer 0/1 multipliers (see clipping.ClipMask); numpy arrays or tensors
Keep = Optional[Sequence[Union[np.ndarray, torch.Tensor]]]


# ===== Data classes =====
@dataclass(frozen=True)
class SaeConfig:
    input_dim: int
    encoder_widths: Tuple[int, ...] = (32, 16, 8)
    activation: str = "relu"
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    def validate(self) -> "SaeConfig":
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ContractError(f"encoder_widths must be a non-empty list of positive counts, got {self.encoder_widths}")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not self.learning_rate >= 0.0 or not math.isfinite(self.learning_rate):
            raise ContractError(f"learning_rate must be a finite non-negative number, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.seed < 0:
            raise ContractError(f"seed must be >= 0, got {self.seed}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SaeConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class SaeModel(nn.Module):
    """Encoder, mirrored decoder and one exit head per non-final encoder layer (head k serves exit k+1)."""

    def __init__(self, config: SaeConfig, encoder: Sequence[nn.Linear], decoder: Sequence[nn.Linear],
                 heads: Sequence[nn.Linear]):
        super().__init__()
        self.config = config
        self.encoder = nn.ModuleList(encoder)
        self.decoder = nn.ModuleList(decoder)
        self.heads = nn.ModuleList(heads)

    @property
    def depth(self) -> int:
        return len(self.encoder)

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    @property
    def widths(self) -> Tuple[int, ...]:
        return self.config.encoder_widths

    def layers(self) -> List[Tuple[str, nn.Linear]]:
        """Every layer in declaration order: encoder, decoder, heads."""
        out = [(f"encoder.{k}", l) for k, l in enumerate(self.encoder)]
        out += [(f"decoder.{j}", l) for j, l in enumerate(self.decoder)]
        out += [(f"heads.{k}", l) for k, l in enumerate(self.heads)]
        return out

    def named_matrices(self) -> List[Tuple[str, np.ndarray]]:
        """numpy views of every parameter, sharing storage with the module."""
        return [(name, p.detach().numpy()) for name, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def copy(self) -> "SaeModel":
        return copy.deepcopy(self)


@dataclass
class TrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    final_loss: float = float("nan")
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {"epoch_losses": list(self.epoch_losses), "final_loss": self.final_loss, "wall_time_s": self.wall_time_s}


# ---------- construction ----------
def layer_shapes(cfg: SaeConfig) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]], List[Tuple[int, int]]]:
    """(out, in) shapes of encoder, decoder (mirror of the encoder) and exit heads."""
    dims = (cfg.input_dim,) + cfg.encoder_widths
    enc = [(dims[k + 1], dims[k]) for k in range(cfg.depth)]
    dec = [(dims[k], dims[k + 1]) for k in range(cfg.depth - 1, -1, -1)]
    heads = [(cfg.input_dim, dims[k + 1]) for k in range(cfg.depth - 1)]
    return enc, dec, heads


def decoder_mirror(depth: int, j: int) -> Optional[int]:
    """Encoder layer index whose width decoder layer j outputs, None for the reconstruction layer."""
    return depth - 2 - j if j < depth - 1 else None


def _generator(seed: int, stream: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state))


def _empty_linear(fan_in: int, fan_out: int) -> nn.Linear:
    return nn.utils.skip_init(nn.Linear, fan_in, fan_out, dtype=DTYPE)


def linear_layer(weight: np.ndarray, bias: np.ndarray) -> nn.Linear:
    """nn.Linear holding copies of `weight` (out x in) and `bias`."""
    weight = np.asarray(weight, dtype=np.float64)
    layer = _empty_linear(weight.shape[1], weight.shape[0])
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(np.ascontiguousarray(weight)))
        layer.bias.copy_(torch.from_numpy(np.asarray(bias, dtype=np.float64).reshape(-1)))
    return layer


def init_model(cfg: SaeConfig) -> SaeModel:
    """Glorot-uniform weights, zero biases, deterministic per cfg.seed."""
    cfg.validate()
    gen = _generator(cfg.seed, INIT_STREAM)

    def make(shapes):
        out = []
        for fan_out, fan_in in shapes:
            layer = _empty_linear(fan_in, fan_out)
            nn.init.xavier_uniform_(layer.weight, generator=gen)
            nn.init.zeros_(layer.bias)
            out.append(layer)
        return out

    enc, dec, heads = layer_shapes(cfg)
    return SaeModel(cfg, make(enc), make(dec), make(heads))


def model_from_matrices(matrices: Sequence[np.ndarray], template: SaeConfig) -> SaeModel:
    """
    Rebuild a model from its matrices in declaration order (weight, bias per
    layer). Input width and encoder widths come from the shapes; training
    hyperparameters come from `template`.
    """
    count = len(matrices)
    if count % 2 or (count // 2 + 1) % 3:
        raise CheckpointError(f"{count} matrices do not describe an encoder/decoder/head stack")
    depth = (count // 2 + 1) // 3
    weights = [np.asarray(m, dtype=np.float64) for m in matrices[0::2]]
    biases = [np.asarray(m, dtype=np.float64).reshape(-1) for m in matrices[1::2]]

    cfg = replace(
        template,
        input_dim=int(weights[0].shape[1]),
        encoder_widths=tuple(int(w.shape[0]) for w in weights[:depth]),
    ).validate()
    enc, dec, heads = layer_shapes(cfg)
    for (name, shape), w, b in zip(
        [("encoder", s) for s in enc] + [("decoder", s) for s in dec] + [("head", s) for s in heads], weights, biases
    ):
        if w.shape != shape or b.shape != (shape[0],):
            raise CheckpointError(f"{name} layer has weight {w.shape} / bias {b.shape}, expected {shape}")

    layers = [linear_layer(w, b) for w, b in zip(weights, biases)]
    return SaeModel(cfg, layers[:depth], layers[depth:2 * depth], layers[2 * depth:])


# ---------- forward ----------
def as_features(model: SaeModel, d: Union[Dataset, np.ndarray]) -> np.ndarray:
    x = d.features if isinstance(d, Dataset) else np.asarray(d, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ContractError(f"input has shape {x.shape}, model expects {model.input_dim} features")
    return x


def as_tensor(model: SaeModel, d: Union[Dataset, np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(as_features(model, d), dtype=np.float64))


def keep_tensors(keep: Keep) -> Optional[Tuple[torch.Tensor, ...]]:
    return None if keep is None else tuple(torch.as_tensor(k, dtype=DTYPE) for k in keep)


def encoder_step(model: SaeModel, k: int, h: torch.Tensor, keep: Keep = None) -> torch.Tensor:
    """Activation of encoder layer k (0-based) given the previous layer's activation."""
    h = torch.relu(model.encoder[k](h))
    if keep is not None:
        h = h * keep[k]
    return h


def encode(model: SaeModel, x: torch.Tensor, keep: Keep = None, upto: Optional[int] = None) -> List[torch.Tensor]:
    """Hidden activations of encoder layers 1..upto (all layers by default)."""
    out = []
    h = x
    for k in range(model.depth if upto is None else upto):
        h = encoder_step(model, k, h, keep)
        out.append(h)
    return out


def decode(model: SaeModel, h: torch.Tensor, keep: Keep = None) -> torch.Tensor:
    for j, layer in enumerate(model.decoder):
        h = layer(h)
        mirror = decoder_mirror(model.depth, j)
        if mirror is not None:
            h = torch.relu(h)
            if keep is not None:
                h = h * keep[mirror]
    return h


def sample_errors(x: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    return torch.mean((recon - x) ** 2, dim=1)


def _reconstruct(model: SaeModel, x: torch.Tensor, exit: int, keep: Keep) -> torch.Tensor:
    L = model.depth
    if not 1 <= exit <= L:
        raise ContractError(f"exit must lie in 1..{L}, got {exit}")
    hidden = encode(model, x, keep, upto=exit)
    if exit < L:
        return model.heads[exit - 1](hidden[-1])
    return decode(model, hidden[-1], keep)


def reconstruct(model: SaeModel, x: Union[Dataset, np.ndarray], exit: int, keep: Keep = None) -> np.ndarray:
    with torch.no_grad():
        return _reconstruct(model, as_tensor(model, x), exit, keep_tensors(keep)).numpy()


def reconstruction_errors(model: SaeModel, d: Union[Dataset, np.ndarray], exit: Optional[int] = None,
                          keep: Keep = None) -> np.ndarray:
    """Per-sample mean squared error at `exit` (1..L; None means the final exit L)."""
    x = as_tensor(model, d)
    with torch.no_grad():
        recon = _reconstruct(model, x, model.depth if exit is None else exit, keep_tensors(keep))
        return sample_errors(x, recon).numpy()


# ---------- thresholds ----------
def nearest_rank(values: np.ndarray, q: float) -> float:
    """Value at 1-based rank ceil(q*n) of the sorted sample (rank 1 when q = 0)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("quantile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ContractError(f"quantile must lie in [0, 1], got {q}")
    rank = max(1, math.ceil(q * values.size - QUANTILE_EPS))
    return float(np.sort(values)[rank - 1])


def calibrate_final_threshold(model: SaeModel, normals: Dataset, q: float, keep: Keep = None) -> float:
    if not 0.0 < q < 1.0:
        raise ContractError(f"q must lie in (0, 1), got {q}")
    if normals.n == 0:
        raise ContractError("empty calibration set")
    return nearest_rank(reconstruction_errors(model, normals, None, keep), q)


def classify(model: SaeModel, d: Union[Dataset, np.ndarray], threshold: float, keep: Keep = None) -> np.ndarray:
    if threshold < 0:
        raise ContractError(f"threshold must be >= 0, got {threshold}")
    return (reconstruction_errors(model, d, None, keep) > threshold).astype(np.int8)


# ---------- training ----------
def joint_loss(model: SaeModel, x: torch.Tensor) -> torch.Tensor:
    """Sum over exits 1..L of the batch-mean per-sample MSE."""
    hidden = encode(model, x)
    terms = [F.mse_loss(head(h), x) for head, h in zip(model.heads, hidden)]
    terms.append(F.mse_loss(decode(model, hidden[-1]), x))
    return torch.stack(terms).sum()


def loss_and_gradients(model: SaeModel, x: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Joint loss and its autograd gradients in `named_matrices()` order."""
    loss = joint_loss(model, as_tensor(model, x))
    grads = torch.autograd.grad(loss, list(model.parameters()))
    return float(loss.detach()), [g.numpy().copy() for g in grads]


def train(model: SaeModel, normals: Dataset) -> TrainReport:
    """Seeded mini-batch SGD with momentum on the joint loss; mutates `model` in place."""
    cfg = model.config
    x = as_tensor(model, normals)
    n = x.shape[0]
    if n == 0:
        raise ContractError("no training rows")

    gen = _generator(cfg.seed, SHUFFLE_STREAM)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    report = TrainReport()
    t0 = time.perf_counter()

    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = x[order[start:start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = joint_loss(model, batch)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"loss became {loss.item()} at epoch {epoch}, batch starting row {start}; "
                    f"lower learning_rate (now {cfg.learning_rate})"
                )
            loss.backward()
            optimizer.step()
            total += loss.item() * batch.shape[0]

        report.epoch_losses.append(total / n)
        if epoch % LOG_EVERY_EPOCHS == 0 or epoch in (1, cfg.epochs):
            logger.info("epoch %d/%d loss %.6f", epoch, cfg.epochs, report.epoch_losses[-1])
    model.eval()

    report.final_loss = report.epoch_losses[-1]
    report.wall_time_s = time.perf_counter() - t0
    return report


# ---------- checkpoint I/O ----------
def checkpoint_bytes(model: SaeModel) -> bytes:
    cfg_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(cfg_blob)), cfg_blob]
    for _, p in model.named_matrices():
        m = p.reshape(1, -1) if p.ndim == 1 else p
        parts.append(struct.pack("<II", *m.shape))
        parts.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: SaeModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: Union[str, Path]) -> SaeModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = path.read_bytes()

    def take(pos: int, size: int) -> bytes:
        if pos + size > len(blob):
            raise CheckpointError(f"{path.name}: truncated at byte {pos}")
        return blob[pos:pos + size]

    if take(0, 4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: not a MOSM checkpoint")
    version, cfg_len = struct.unpack("<BI", take(4, 5))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported checkpoint version {version}")
    cfg = SaeConfig.from_dict(json.loads(take(9, cfg_len).decode("utf-8")))
    pos = 9 + cfg_len

    enc, dec, heads = layer_shapes(cfg)
    matrices = []
    for _ in range(2 * len(enc + dec + heads)):
        rows, cols = struct.unpack("<II", take(pos, 8))
        pos += 8
        data = np.frombuffer(take(pos, 8 * rows * cols), dtype="<f8").astype(np.float64)
        pos += 8 * rows * cols
        matrices.append(data.reshape(rows, cols))
    if pos != len(blob):
        raise CheckpointError(f"{path.name}: {len(blob) - pos} trailing bytes")
    return model_from_matrices(matrices, cfg)
