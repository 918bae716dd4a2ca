"""Shared transformer over per-stream token grids.

Each active stream is embedded onto the same (H/p) x (W/p) token grid. The
streams' token sequences are concatenated into one joint sequence and run
through shared attention/MLP blocks, while per-stream timestep embeddings
drive per-stream AdaLN modulation. A block-causal mask keyed on stream
maturity (dino -> fre -> pix) controls who may attend to whom. The summed
input ``h0 = sum_m E_m(z_m)`` is available as :attr:`StreamTokens.summed`.

The pixel stream is an image patchified by ``E_pix``. The frequency and
semantic streams live on the token grid already (the frequency target is
``E(lowpass(x))``), so they enter through a per-stream linear projection.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, Module, param
from .tensor import Tensor

MATURITY = ("dino", "fre", "pix")


@dataclass
class BackboneConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    width: int = 256
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    streams: tuple = ("fre", "pix")
    dino_dim: int = 16
    t_freq_dim: int = 64

    def __post_init__(self):
        self.streams = order_streams(self.streams)
        if self.width % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.image_size % self.patch:
            raise ValueError("patch size must divide image size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def stream_dim(self, stream: str) -> int:
        return {"pix": self.patch_dim, "fre": self.width, "dino": self.dino_dim}[stream]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d


def order_streams(streams) -> tuple:
    streams = tuple(streams)
    if len(set(streams)) != len(streams):
        raise ValueError(f"duplicate stream ids in {streams}")
    unknown = set(streams) - set(MATURITY)
    if unknown or not streams:
        raise ValueError(f"invalid stream list {streams}")
    return tuple(s for s in MATURITY if s in streams)


def build_mask(streams) -> np.ndarray:
    """Stream-level mask: entry (q, k) is True iff stream q may attend to stream k.

    ``streams`` must be ordered by maturity (earliest first); the result is
    lower-triangular.
    """
    streams = tuple(streams)
    if len(set(streams)) != len(streams):
        raise ValueError(f"duplicate stream ids in {streams}")
    if not streams:
        raise ValueError("need at least one stream")
    n = len(streams)
    return np.tril(np.ones((n, n), dtype=bool))


def token_mask(streams, tokens: int) -> np.ndarray:
    """Expand the stream mask to the joint (stream, token) sequence."""
    return np.kron(build_mask(streams), np.ones((tokens, tokens), dtype=bool))


def patchify(x, p: int) -> Tensor:
    """[B, C, H, W] -> [B, (H/p)(W/p), p*p*C]."""
    x = T.as_tensor(x)
    B, C, H, W = x.shape
    g, h = H // p, W // p
    x = x.reshape(B, C, g, p, h, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(B, g * h, p * p * C)


def unpatchify(tokens, p: int, C: int, H: int, W: int) -> Tensor:
    tokens = T.as_tensor(tokens)
    B = tokens.shape[0]
    g, h = H // p, W // p
    x = tokens.reshape(B, g, h, p, p, C).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(B, C, H, W)


def timestep_features(t, dim: int = 64, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 t``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def pos_embed_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed 2D sin-cos positional embedding, [grid*grid, dim]."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / max(quarter, 1))
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        out = coord[:, None] * omega[None]
        parts += [np.sin(out), np.cos(out)]
    emb = np.concatenate(parts, axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


class PatchEmbedding(Module):
    """Linear projection of non-overlapping p x p patches to width d."""

    def __init__(self, cfg: BackboneConfig, rng, stream_id: str = "pix"):
        self.patch = cfg.patch
        self.stream_id = stream_id
        self.proj = Linear(cfg.patch_dim, cfg.width, rng)

    def __call__(self, images) -> Tensor:
        return self.proj(patchify(images, self.patch))

    def clone(self, stream_id: str, frozen: bool = True) -> "PatchEmbedding":
        new = copy.deepcopy(self)
        new.stream_id = stream_id
        for _, p in new.named_parameters():
            p.grad = None
        if frozen:
            new.freeze()
        return new


class TimestepEmbedder(Module):
    def __init__(self, width: int, rng, freq_dim: int = 64):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, width, rng)
        self.fc2 = Linear(width, width, rng)

    def __call__(self, t) -> Tensor:
        return self.fc2(T.silu(self.fc1(Tensor(timestep_features(t, self.freq_dim)))))


class Block(Module):
    """Pre-norm attention + MLP block with per-stream AdaLN modulation."""

    def __init__(self, cfg: BackboneConfig, rng, zero_init: bool):
        d = cfg.width
        self.heads = cfg.heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        hidden = int(d * cfg.mlp_ratio)
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.adaln = {s: Linear(d, 6 * d, rng, zero=zero_init) for s in cfg.streams}

    def __call__(self, x: Tensor, conds: dict, streams: tuple, mask_add: np.ndarray) -> Tensor:
        B, S, N, d = x.shape
        mods = [self.adaln[s](T.silu(conds[s])).reshape(B, 1, 1, 6 * d) for s in streams]
        mod = mods[0] if S == 1 else T.concat(mods, axis=1)
        shift1, scale1, gate1 = mod[..., :d], mod[..., d : 2 * d], mod[..., 2 * d : 3 * d]
        shift2, scale2, gate2 = mod[..., 3 * d : 4 * d], mod[..., 4 * d : 5 * d], mod[..., 5 * d :]

        h = T.layer_norm(x, 1e-6) * (scale1 + 1.0) + shift1
        x = x + gate1 * self._attention(h.reshape(B, S * N, d), mask_add).reshape(B, S, N, d)
        h = T.layer_norm(x, 1e-6) * (scale2 + 1.0) + shift2
        x = x + gate2 * self.fc2(T.gelu(self.fc1(h)))
        return x

    def _attention(self, h: Tensor, mask_add: np.ndarray) -> Tensor:
        B, M, d = h.shape
        nh = self.heads
        hd = d // nh
        qkv = self.qkv(h).reshape(B, M, 3, nh, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        if mask_add is not None:
            logits = logits + mask_add
        att = T.softmax(logits, axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, M, d)
        return self.proj(out)


class FinalLayer(Module):
    def __init__(self, d: int, d_out: int, rng, zero_init: bool):
        self.adaln = Linear(d, 2 * d, rng, zero=zero_init)
        self.linear = Linear(d, d_out, rng, zero=zero_init)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        d = x.shape[-1]
        mod = self.adaln(T.silu(cond)).reshape(cond.shape[0], 1, 2 * d)
        h = T.layer_norm(x, 1e-6) * (mod[..., d:] + 1.0) + mod[..., :d]
        return self.linear(h)


@dataclass
class StreamTokens:
    """Per-stream input embeddings ``E_m(z_m)``, ordered by maturity."""

    per_stream: dict = field(default_factory=dict)

    @property
    def streams(self) -> tuple:
        return order_streams(self.per_stream)

    @property
    def summed(self) -> Tensor:
        out = None
        for s in self.streams:
            out = self.per_stream[s] if out is None else out + self.per_stream[s]
        return out


class Backbone(Module):
    """Multi-stream DiT with x-prediction heads."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, zero_init: bool = True):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.width
        self.patch_embed = PatchEmbedding(cfg, rng, "pix")
        self.latent_in = {s: Linear(cfg.stream_dim(s), d, rng) for s in cfg.streams if s != "pix"}
        self.t_embed = {s: TimestepEmbedder(d, rng, cfg.t_freq_dim) for s in cfg.streams}
        self.y_embed = param(rng.normal(0.0, 0.02, size=(cfg.num_classes + 1, d)))
        self.blocks = [Block(cfg, rng, zero_init) for _ in range(cfg.depth)]
        self.final = {s: FinalLayer(d, cfg.stream_dim(s), rng, zero_init) for s in cfg.streams}
        # frequency-target encoder: None means "tied to patch_embed under stopgrad"
        self.target_embed: PatchEmbedding | None = None
        self._pos = pos_embed_2d(cfg.grid, d)

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    @property
    def frozen_copy(self) -> bool:
        return self.target_embed is not None

    def embed_streams(self, states: dict) -> StreamTokens:
        """Map each stream's noised state onto the shared token grid."""
        out = {}
        for s in order_streams(states):
            if s not in self.cfg.streams:
                raise ValueError(f"stream {s!r} is not part of this model ({self.cfg.streams})")
            z = T.as_tensor(states[s])
            tok = self.patch_embed(z) if s == "pix" else self.latent_in[s](z)
            if tok.shape[1] != self.cfg.tokens:
                raise T.ShapeError(f"stream {s} produced {tok.shape[1]} tokens, expected {self.cfg.tokens}")
            out[s] = tok
        return StreamTokens(out)

    def encode_target(self, images) -> Tensor:
        """Frequency-stream clean target ``x_fre`` for a low-pass image batch."""
        if self.target_embed is None:
            return self.patch_embed(images).detach()
        return self.target_embed(images)

    def forward(self, states: dict, t: dict, labels, streams=None) -> dict:
        """x-predictions for every stream in ``states``.

        ``t`` maps stream -> per-sample clocks; ``labels`` may contain the null
        class. The attention mask is derived from the active streams.
        """
        tokens = self.embed_streams(states)
        return self.forward_tokens(tokens, t, labels)

    __call__ = forward

    def forward_tokens(self, tokens: StreamTokens, t: dict, labels) -> dict:
        cfg = self.cfg
        streams = tokens.streams
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if np.any((labels < 0) | (labels > cfg.num_classes)):
            raise ValueError(f"class label outside [0, {cfg.num_classes}]")
        B = tokens.per_stream[streams[0]].shape[0]
        if len(labels) == 1 and B > 1:
            labels = np.repeat(labels, B)
        y = self.y_embed[labels]
        conds = {}
        for s in streams:
            ts = np.broadcast_to(np.asarray(t[s], dtype=np.float64).reshape(-1), (B,))
            if np.any((ts < 0) | (ts > 1)):
                raise ValueError(f"clock for stream {s} outside [0, 1]")
            conds[s] = self.t_embed[s](ts) + y
        pos = self._pos
        seq = [(tokens.per_stream[s] + pos).reshape(B, 1, cfg.tokens, cfg.width) for s in streams]
        x = seq[0] if len(seq) == 1 else T.concat(seq, axis=1)
        mask = token_mask(streams, cfg.tokens)
        mask_add = None if mask.all() else np.where(mask, 0.0, -np.inf)
        for blk in self.blocks:
            x = blk(x, conds, streams, mask_add)
        out = {}
        for i, s in enumerate(streams):
            o = self.final[s](x[:, i], conds[s])
            if s == "pix":
                o = unpatchify(o, cfg.patch, cfg.channels, cfg.image_size, cfg.image_size)
            out[s] = o
        for s, o in out.items():
            if not np.all(np.isfinite(o.data)):
                raise FloatingPointError(f"non-finite activations in the {s} head")
        return out

    def stream_shape(self, stream: str, batch: int) -> tuple:
        cfg = self.cfg
        if stream == "pix":
            return (batch, cfg.channels, cfg.image_size, cfg.image_size)
        return (batch, cfg.tokens, cfg.stream_dim(stream))


def clone_and_freeze_patch_embed(model: Backbone) -> Backbone:
    """Give the frequency branch a frozen deep copy of the pixel patch embedding."""
    if model.target_embed is not None:
        raise RuntimeError("patch embedding has already been cloned and frozen")
    model.target_embed = model.patch_embed.clone("fre", frozen=True)
    return model
