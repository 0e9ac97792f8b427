"""Item embeddings and the multi-interest extractor.

A user's behavior sequence is embedded, pushed through a small tanh attention
network with one query vector per interest, and pooled into `num_interests`
interest vectors. All forward math runs through gradcore so the same code
serves training (taped) and inference (untaped).
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

CHECKPOINT_MAGIC = b"MIRECKPT"
CHECKPOINT_VERSION = 1


@dataclass
class HyperParams:
    embed_dim: int = 64
    att_hidden_dim: int = 256
    recon_hidden_dim: int = 32
    num_interests: int = 8
    max_seq_len: int = 20
    temperature: float = 0.02
    pos_threshold: float | str = "adaptive"
    lambda_contrast: float = 0.0
    lambda_attend: float = 0.0
    lambda_reconstruct: float = 0.0
    num_rec_negatives: int = 128
    num_seq_negatives: int | None = None
    logq_correction: bool = False

    def __post_init__(self):
        for name in ("embed_dim", "att_hidden_dim", "recon_hidden_dim",
                     "num_interests", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.pos_threshold != "adaptive" and not (0.0 < float(self.pos_threshold) < 1.0):
            raise ValueError(f"pos_threshold must be in (0,1) or 'adaptive', got {self.pos_threshold}")
        for name in ("lambda_contrast", "lambda_attend", "lambda_reconstruct"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.num_rec_negatives < 1:
            raise ValueError(f"num_rec_negatives must be >= 1, got {self.num_rec_negatives}")


@dataclass
class BehaviorSequence:
    """One user's interaction history, left-aligned and padded to max_seq_len."""

    user_id: int
    item_ids: np.ndarray  # (max_seq_len,) int64, zeros past the valid prefix
    mask: np.ndarray  # (max_seq_len,) bool

    @classmethod
    def from_items(cls, user_id, items, max_seq_len):
        """Build from a chronological item list, keeping the last max_seq_len items."""
        items = list(items)
        if not items:
            raise ValueError(f"user {user_id}: empty behavior sequence")
        items = items[-max_seq_len:]
        ids = np.zeros(max_seq_len, dtype=np.int64)
        mask = np.zeros(max_seq_len, dtype=bool)
        ids[: len(items)] = items
        mask[: len(items)] = True
        return cls(user_id=user_id, item_ids=ids, mask=mask)

    @property
    def length(self):
        return int(self.mask.sum())


@dataclass
class InterestSet:
    """Extractor output for one sequence.

    interests holds one row per interest (num_interests x embed_dim);
    attention holds the weights over sequence positions (num_interests x
    max_seq_len), zero at padded positions.
    """

    interests: Tensor
    attention: Tensor


@dataclass
class ModelParams:
    """All trainable tensors.

    Checkpoint order is the order of named(): item_emb, att_hidden,
    att_query, val_proj, recon_hidden, recon_expand, recon_out, recon_query.
    """

    item_emb: Tensor  # (num_items, d)
    att_hidden: Tensor  # (d_h, d) shared attention transform
    att_query: Tensor  # (num_interests, d_h) one query per interest
    val_proj: Tensor  # (d, d) value projection for interest pooling
    recon_hidden: Tensor  # (d_b, d_b) slot transform in the reconstruction attention
    recon_expand: Tensor  # (max_seq_len*d_b, d) interest -> slot codes
    recon_out: Tensor  # (d, d_b) slot code -> item-embedding space
    recon_query: Tensor  # (max_seq_len, d_b) one query per reconstructed position

    @classmethod
    def init(cls, num_items, hp, rng):
        """Uniform init scaled by 1/sqrt(fan_in) for every tensor."""

        def uni(shape, fan_in):
            lim = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-lim, lim, size=shape))

        d, d_h, d_b = hp.embed_dim, hp.att_hidden_dim, hp.recon_hidden_dim
        return cls(
            item_emb=uni((num_items, d), d),
            att_hidden=uni((d_h, d), d),
            att_query=uni((hp.num_interests, d_h), d_h),
            val_proj=uni((d, d), d),
            recon_hidden=uni((d_b, d_b), d_b),
            recon_expand=uni((hp.max_seq_len * d_b, d), d),
            recon_out=uni((d, d_b), d_b),
            recon_query=uni((hp.max_seq_len, d_b), d_b),
        )

    def named(self):
        return [
            ("item_emb", self.item_emb),
            ("att_hidden", self.att_hidden),
            ("att_query", self.att_query),
            ("val_proj", self.val_proj),
            ("recon_hidden", self.recon_hidden),
            ("recon_expand", self.recon_expand),
            ("recon_out", self.recon_out),
            ("recon_query", self.recon_query),
        ]

    def tensors(self):
        return [t for _, t in self.named()]

    @property
    def num_items(self):
        return self.item_emb.value.shape[0]

    def dims(self):
        """(num_items, d, d_h, d_b, max_seq_len, num_interests) as stored in checkpoints."""
        num_items, d = self.item_emb.value.shape
        d_h = self.att_hidden.value.shape[0]
        d_b = self.recon_hidden.value.shape[0]
        max_seq_len = self.recon_query.value.shape[0]
        num_interests = self.att_query.value.shape[0]
        return num_items, d, d_h, d_b, max_seq_len, num_interests


def _linear(x, w):
    """x @ w.T for x (..., in) and weight (out, in)."""
    return gc.matmul(x, gc.swapaxes(w, 0, 1))


def embed(seq, params):
    """Embed one sequence to (max_seq_len, d); padded rows are exactly zero."""
    num_items = params.num_items
    valid_ids = seq.item_ids[seq.mask]
    if valid_ids.size and (valid_ids.min() < 0 or valid_ids.max() >= num_items):
        bad = valid_ids[(valid_ids < 0) | (valid_ids >= num_items)][0]
        raise ValueError(f"item id {bad} out of range for embedding table with {num_items} rows")
    rows = gc.gather_rows(params.item_emb, seq.item_ids)
    return gc.mul(rows, seq.mask[:, None].astype(np.float64))


def interest_forward(x_emb, mask, params):
    """Batched extractor core.

    x_emb: Tensor (B, max_seq_len, d) with padded rows zero; mask: (B, max_seq_len)
    bool. Returns (interests (B, num_interests, d), attention (B, num_interests,
    max_seq_len)).
    """
    num_interests = params.att_query.value.shape[0]
    b, n_x = mask.shape
    hidden = gc.tanh(_linear(x_emb, params.att_hidden))  # (B, n_x, d_h)
    logits = gc.swapaxes(_linear(hidden, params.att_query), 1, 2)  # (B, n_z, n_x)
    att_mask = np.broadcast_to(mask[:, None, :], (b, num_interests, n_x))
    attention = gc.masked_softmax(logits, att_mask, axis=-1)
    values = _linear(x_emb, params.val_proj)  # (B, n_x, d)
    interests = gc.matmul(attention, values)  # (B, n_z, d)
    return interests, attention


def extract_interests(x_emb, mask, params):
    """Per-sequence extractor: x_emb (max_seq_len, d), mask (max_seq_len,) bool."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot extract interests from a fully masked (empty) sequence")
    n_x, d = x_emb.value.shape
    interests, attention = interest_forward(
        gc.reshape(x_emb, (1, n_x, d)), mask[None, :], params
    )
    num_interests = params.att_query.value.shape[0]
    return InterestSet(
        interests=gc.reshape(interests, (num_interests, d)),
        attention=gc.reshape(attention, (num_interests, n_x)),
    )


def score(z, y):
    """Dot-product relevance between an interest vector and an item vector."""
    zv = z.value if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    yv = y.value if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if zv.shape != yv.shape or zv.ndim != 1:
        raise ValueError(f"score needs equal-length vectors, got {zv.shape} and {yv.shape}")
    return float(zv @ yv)


def save_checkpoint(params, path):
    """Write params to a binary checkpoint.

    Layout: 8-byte magic "MIRECKPT"; then 7 little-endian uint32: format
    version, num_items, d, d_h, d_b, max_seq_len, num_interests; then every
    tensor from ModelParams.named() in order, row-major little-endian float64.
    """
    header = struct.pack("<8s7I", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *params.dims())
    with open(path, "wb") as f:
        f.write(header)
        for _, t in params.named():
            if not np.all(np.isfinite(t.value)):
                raise ValueError("refusing to checkpoint non-finite parameters")
            f.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; returns ModelParams."""
    with open(path, "rb") as f:
        data = f.read()
    head_size = struct.calcsize("<8s7I")
    if len(data) < head_size:
        raise ValueError(f"checkpoint too short: {len(data)} bytes")
    magic, version, num_items, d, d_h, d_b, n_x, n_z = struct.unpack_from("<8s7I", data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version} not supported, "
                         f"this build reads version {CHECKPOINT_VERSION}")
    shapes = [
        ("item_emb", (num_items, d)),
        ("att_hidden", (d_h, d)),
        ("att_query", (n_z, d_h)),
        ("val_proj", (d, d)),
        ("recon_hidden", (d_b, d_b)),
        ("recon_expand", (n_x * d_b, d)),
        ("recon_out", (d, d_b)),
        ("recon_query", (n_x, d_b)),
    ]
    offset = head_size
    tensors = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise ValueError(f"checkpoint truncated in tensor {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"checkpoint tensor {name} has non-finite entries")
        tensors[name] = Tensor(arr.copy())
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"checkpoint has {len(data) - offset} trailing bytes")
    return ModelParams(**tensors)
