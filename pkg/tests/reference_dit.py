"""Plain-numpy single-stream DiT and Euler sampler used as an independent oracle.

Reads weights out of a freqforce Backbone but shares no code with it.
"""

import math

import numpy as np


def _lin(layer, x):
    return x @ layer.weight.data + layer.bias.data


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _ln(x, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _pos(grid, d):
    q = d // 4
    omega = np.array([1.0 / 10000 ** (i / q) for i in range(q)])
    rows = []
    for r in range(grid):
        for c in range(grid):
            rows.append(np.concatenate([np.sin(r * omega), np.cos(r * omega), np.sin(c * omega), np.cos(c * omega)]))
    emb = np.array(rows)
    return np.pad(emb, ((0, 0), (0, d - emb.shape[1])))


def _tfeat(t, dim):
    half = dim // 2
    freqs = np.array([math.exp(-math.log(10000.0) * i / half) for i in range(half)])
    args = np.outer(np.asarray(t, dtype=np.float64) * 1000.0, freqs)
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def single_stream_forward(model, z, t, labels):
    """Vanilla DiT x-prediction for the pixel stream using the model's pixel weights."""
    cfg = model.cfg
    p, d, nh = cfg.patch, cfg.width, cfg.heads
    B, C, H, W = z.shape
    g = H // p
    N = g * g
    hd = d // nh
    tok = z.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 3, 5, 1).reshape(B, N, p * p * C)
    h = _lin(model.patch_embed.proj, tok) + _pos(g, d)
    te = model.t_embed["pix"]
    c = _lin(te.fc2, _silu(_lin(te.fc1, _tfeat(np.broadcast_to(t, (B,)), te.freq_dim))))
    c = c + model.y_embed.data[np.asarray(labels)]
    for blk in model.blocks:
        mod = _lin(blk.adaln["pix"], _silu(c))[:, None, :]
        sh1, sc1, g1, sh2, sc2, g2 = (mod[..., i * d : (i + 1) * d] for i in range(6))
        a = _ln(h) * (1 + sc1) + sh1
        qkv = _lin(blk.qkv, a)
        heads = []
        for j in range(nh):
            q = qkv[..., j * hd : (j + 1) * hd]
            k = qkv[..., d + j * hd : d + (j + 1) * hd]
            v = qkv[..., 2 * d + j * hd : 2 * d + (j + 1) * hd]
            att = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(hd))
            heads.append(att @ v)
        h = h + g1 * _lin(blk.proj, np.concatenate(heads, axis=-1))
        a = _ln(h) * (1 + sc2) + sh2
        h = h + g2 * _lin(blk.fc2, _gelu(_lin(blk.fc1, a)))
    fl = model.final["pix"]
    mod = _lin(fl.adaln, _silu(c))[:, None, :]
    out = _lin(fl.linear, _ln(h) * (1 + mod[..., d:]) + mod[..., :d])
    return out.reshape(B, g, g, p, p, C).transpose(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)


def euler_sample(model, labels, steps, seed, t_clip=0.05, guidance=1.0):
    """Standard single-stream Euler flow-matching sampler; returns every state."""
    cfg = model.cfg
    labels = np.asarray(labels)
    B = len(labels)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((B, cfg.channels, cfg.image_size, cfg.image_size))
    states = [z]
    for i in range(steps):
        t = i / steps
        denom = max(1.0 - t, t_clip)
        v = (single_stream_forward(model, z, t, labels) - z) / denom
        if guidance != 1.0:
            vu = (single_stream_forward(model, z, t, np.full(B, cfg.num_classes)) - z) / denom
            v = vu + guidance * (v - vu)
        z = z + (1.0 / steps) * v
        states.append(z)
    return states
