"""Learnable 2D wavelet packet transform.

A single learnable 1D low-pass filter determines the whole bank: the
high-pass is its quadrature mirror, and the four 2D kernels are outer
products. Analysis runs as stride-2 depthwise convolution with periodic
boundaries, which makes any even-shift orthonormal filter an exact
orthogonal transform (synthesis is the adjoint).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module, make_optimizer, param
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
BANDS = ("LL", "LH", "HL", "HH")
BOUNDARY = "periodic"

HAAR = np.array([1.0, 1.0]) / SQRT2
DB2 = np.array([1 + math.sqrt(3), 3 + math.sqrt(3), 3 - math.sqrt(3), 1 - math.sqrt(3)]) / (4 * SQRT2)

# Roundoff residuals at a regularizer's kink get a zero subgradient.
_KINK = 1e-12


def haar_filter(K: int = 2) -> np.ndarray:
    """Haar low-pass zero-padded on the right to length K."""
    if K < 2 or K % 2:
        raise ValueError(f"filter length must be even and >= 2, got {K}")
    h = np.zeros(K)
    h[:2] = HAAR
    return h


@dataclass
class WaveletRegWeights:
    sum: float = 1.0
    hp: float = 1.0
    ortho: float = 1.0
    sparse: float = 0.01

    def __post_init__(self):
        for name in ("sum", "hp", "ortho", "sparse"):
            if getattr(self, name) < 0:
                raise ValueError(f"regularizer weight {name} must be >= 0")


class FilterBank(Module):
    """Learnable low-pass filter ``h_lp``; everything else is derived from it."""

    def __init__(self, h_lp, a: float = 10.0, trainable: bool = True):
        h = np.asarray(h_lp, dtype=np.float64)
        if h.ndim != 1 or len(h) < 2 or len(h) % 2:
            raise ValueError(f"filter length must be even and >= 2, got shape {h.shape}")
        if a <= 0:
            raise ValueError("gate sharpness a must be positive")
        self.h_lp = param(h) if trainable else Tensor(h, name="param")
        self.a = float(a)

    @property
    def K(self) -> int:
        return self.h_lp.shape[0]

    @classmethod
    def haar(cls, K: int = 2, **kw) -> "FilterBank":
        return cls(haar_filter(K), **kw)

    def highpass(self) -> Tensor:
        return qmf_highpass(self.h_lp)

    def kernels(self) -> "KernelSet2D":
        return build_kernels(self.h_lp)


@dataclass
class KernelSet2D:
    LL: Tensor
    LH: Tensor
    HL: Tensor
    HH: Tensor

    def __iter__(self):
        return iter((self.LL, self.LH, self.HL, self.HH))


def qmf_highpass(h_lp) -> Tensor:
    """``h_hp[k] = (-1)^k h_lp[K-1-k]``."""
    h_lp = T.as_tensor(h_lp)
    K = h_lp.shape[0]
    if K % 2:
        raise ValueError(f"QMF relation needs even filter length, got {K}")
    signs = np.where(np.arange(K) % 2 == 0, 1.0, -1.0)
    return h_lp[::-1] * signs


def build_kernels(h_lp) -> KernelSet2D:
    """Separable kernels; the first factor runs down rows, the second across columns."""
    lo = T.as_tensor(h_lp)
    hi = qmf_highpass(lo)
    K = lo.shape[0]
    col = lambda v: v.reshape(K, 1)
    row = lambda v: v.reshape(1, K)
    return KernelSet2D(col(lo) * row(lo), col(lo) * row(hi), col(hi) * row(lo), col(hi) * row(hi))


def _as_kernels(bank) -> KernelSet2D:
    if isinstance(bank, KernelSet2D):
        return bank
    if isinstance(bank, FilterBank):
        return bank.kernels()
    return build_kernels(bank)


def dwt_step(x, bank) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """One level of analysis: ``(C_LL, C_LH, C_HL, C_HH)``, each ceil(H/2) x ceil(W/2)."""
    ks = _as_kernels(bank)
    K = ks.LL.shape[-1]
    return tuple(T.conv2d_depthwise_stride2(x, k.reshape(1, K, K), BOUNDARY) for k in ks)


def idwt_step(bands, bank, out_size: tuple | None = None) -> Tensor:
    """Synthesis from four subbands; ``None`` entries are treated as zero."""
    ks = _as_kernels(bank)
    K = ks.LL.shape[-1]
    out = None
    for band, k in zip(bands, ks):
        if band is None:
            continue
        y = T.conv2d_transpose_depthwise_stride2(band, k.reshape(1, K, K), BOUNDARY, out_size)
        out = y if out is None else out + y
    if out is None:
        raise ValueError("idwt_step needs at least one subband")
    return out


def hard_threshold(x, gamma, a: float) -> Tensor:
    """Smooth hard threshold ``x * (sigmoid(-a(x+g)) + sigmoid(a(x-g)))``.

    Written as ``x * (1 + (sigmoid(a(x-g)) - sigmoid(a(x+g))))`` so that g = 0
    returns x bit-for-bit.
    """
    if a <= 0:
        raise ValueError("gate sharpness a must be positive")
    gamma = T.as_tensor(gamma)
    if np.any(gamma.data < 0):
        raise ValueError("threshold gamma must be >= 0")
    x = T.as_tensor(x)
    gate = 1.0 + (T.sigmoid(a * (x - gamma)) - T.sigmoid(a * (x + gamma)))
    return x * gate


# -- packet tree --------------------------------------------------------------------


def packet_paths(L: int) -> list[tuple[str, ...]]:
    """All tree nodes below the root in depth-first LL-LH-HL-HH preorder."""
    out = []

    def rec(prefix):
        if len(prefix) == L:
            return
        for b in BANDS:
            out.append(prefix + (b,))
            rec(prefix + (b,))

    rec(())
    return out


def n_nodes(L: int) -> int:
    return sum(4**l for l in range(1, L + 1))


class Thresholds(Module):
    """One nonnegative threshold per tree node, ``gamma = softplus(raw)``."""

    def __init__(self, L: int, init: float = 1e-3):
        self.L = L
        self.raw = param(np.full(n_nodes(L), _softplus_inv(init)))

    def gammas(self) -> Tensor:
        return T.softplus(self.raw)


def _softplus_inv(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus inverse needs a positive value")
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class PacketTree:
    L: int
    paths: list[tuple[str, ...]]
    subbands: list[Tensor]
    gammas: Tensor | None = None
    nodes: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.subbands)


def wpt_analyze_full(x, bank, L: int, gammas=None, a: float | None = None) -> PacketTree:
    """Full packet decomposition to depth L, gating every node output.

    ``gammas`` holds one threshold per node in :func:`packet_paths` order; None
    disables gating. Terminal subbands come back in depth-first order.
    """
    x = T.as_tensor(x)
    if L < 1:
        raise ValueError("depth L must be >= 1")
    ks = _as_kernels(bank)
    K = ks.LL.shape[-1]
    need = K * 2 ** (L - 1)
    if min(x.shape[-2:]) < need:
        raise T.ShapeError(f"input {x.shape[-2:]} too small for depth {L} with K={K} (need >= {need})")
    if a is None:
        a = bank.a if isinstance(bank, FilterBank) else 10.0
    if gammas is not None:
        gammas = T.as_tensor(gammas)
        if gammas.shape != (n_nodes(L),):
            raise ValueError(f"expected {n_nodes(L)} thresholds, got {gammas.shape}")
    paths = packet_paths(L)
    index = {p: i for i, p in enumerate(paths)}
    nodes: dict[tuple, Tensor] = {}

    def rec(node, prefix):
        for b, c in zip(BANDS, dwt_step(node, ks)):
            path = prefix + (b,)
            if gammas is not None:
                c = hard_threshold(c, gammas[index[path]], a)
            nodes[path] = c
            if len(path) < L:
                rec(c, path)

    rec(x, ())
    terminal = [p for p in paths if len(p) == L]
    return PacketTree(L, terminal, [nodes[p] for p in terminal], gammas, nodes)


def wpt_synthesize_full(tree: PacketTree, bank, out_size: tuple) -> Tensor:
    """Invert an (ungated) full packet tree back to ``out_size``."""
    ks = _as_kernels(bank)
    sizes = [tuple(out_size)]
    for _ in range(tree.L - 1):
        h, w = sizes[-1]
        sizes.append(((h + 1) // 2, (w + 1) // 2))
    leaves = dict(zip(tree.paths, tree.subbands))

    def rec(prefix):
        depth = len(prefix)
        if depth == tree.L:
            return leaves[prefix]
        kids = [rec(prefix + (b,)) for b in BANDS]
        return idwt_step(kids, ks, sizes[depth])

    return rec(())


# -- regularizers ----------------------------------------------------------------------


def reg_sum(h_lp) -> Tensor:
    h = T.as_tensor(h_lp)
    return T.tabs(h.sum() - SQRT2, _KINK)


def reg_hp(h_lp) -> Tensor:
    return T.tabs(qmf_highpass(h_lp).sum(), _KINK)


def reg_ortho(h_lp) -> Tensor:
    """Even-shift orthogonality penalty averaged over shifts 0, 2, ..., K-2."""
    h = T.as_tensor(h_lp)
    K = h.shape[0]
    shifts = range(0, K - 1, 2)
    total = T.tabs((h * h).sum() - 1.0, _KINK)
    for s in shifts:
        if s == 0:
            continue
        total = total + T.tabs((h[s:] * h[: K - s]).sum(), _KINK)
    return total * (1.0 / len(shifts))


def reg_sparse(tree: PacketTree) -> Tensor:
    """Mean over terminal bands of their L1 norm (batch-averaged when batched)."""
    n = len(tree.subbands)
    batch = int(np.prod(tree.subbands[0].shape[:-3])) if tree.subbands[0].ndim > 3 else 1
    total = None
    for y in tree.subbands:
        term = T.l1_norm(y)
        total = term if total is None else total + term
    return total * (1.0 / (n * batch))


def wavelet_regs(h_lp) -> dict[str, Tensor]:
    return {"sum": reg_sum(h_lp), "hp": reg_hp(h_lp), "ortho": reg_ortho(h_lp)}


# -- low-frequency extractor -------------------------------------------------------------


def lowpass_depth(H: int, W: int, s: int) -> int:
    """Number of ceil-halvings taking H (and W) down to s."""
    L, h, w = 0, H, W
    while h > s or w > s:
        h, w = (h + 1) // 2, (w + 1) // 2
        L += 1
    if h != s or w != s or L == 0:
        raise ValueError(f"cannot reach {s}x{s} from {H}x{W} by repeated halving")
    return L


def center_crop_or_pad(x, H: int, W: int) -> Tensor:
    """Center-crop or zero-pad the last two axes to exactly H x W."""
    x = T.as_tensor(x)
    h, w = x.shape[-2:]
    if h >= H:
        top = (h - H) // 2
        x = x[..., top : top + H, :]
    if w >= W:
        left = (w - W) // 2
        x = x[..., :, left : left + W]
    h, w = x.shape[-2:]
    if h < H or w < W:
        pt, pl = (H - h) // 2, (W - w) // 2
        Pm = np.zeros((H, h))
        Pm[pt : pt + h, :] = np.eye(h)
        Qm = np.zeros((W, w))
        Qm[pl : pl + w, :] = np.eye(w)
        x = T.matmul(T.matmul(Tensor(Pm), x), Tensor(Qm.T))
    return x


def extract_lowfreq(x, bank, s: int) -> Tensor:
    """Keep only the LL chain down to s x s, then reconstruct at full size.

    The LL path is never gated. Reconstruction runs one synthesis step per
    level with zeroed detail bands.
    """
    x = T.as_tensor(x)
    H, W = x.shape[-2:]
    L = lowpass_depth(H, W, s)
    ks = _as_kernels(bank)
    sizes = []
    c = x
    for _ in range(L):
        sizes.append(c.shape[-2:])
        c = dwt_step(c, ks)[0]
    for size in reversed(sizes):
        c = idwt_step((c, None, None, None), ks, size)
    return center_crop_or_pad(c, H, W)


# -- fitting -------------------------------------------------------------------------------


@dataclass
class FitResult:
    h_lp: np.ndarray
    gammas: np.ndarray
    regs: dict
    history: list = field(default_factory=list)


class DivergenceError(RuntimeError):
    pass


def wavelet_objective(bank: FilterBank, thresholds: Thresholds | None, batch, weights: WaveletRegWeights,
                      gate: bool = True) -> tuple[Tensor, dict]:
    regs = wavelet_regs(bank.h_lp)
    g = thresholds.gammas() if (gate and thresholds is not None) else None
    L = thresholds.L if thresholds is not None else 2
    tree = wpt_analyze_full(batch, bank, L, g, bank.a)
    regs["sparse"] = reg_sparse(tree)
    total = (weights.sum * regs["sum"] + weights.hp * regs["hp"]
             + weights.ortho * regs["ortho"] + weights.sparse * regs["sparse"])
    return total, regs


def fit_wavelet(corpus: np.ndarray, bank: FilterBank, thresholds: Thresholds, weights: WaveletRegWeights,
                steps: int, batch_size: int = 16, lr: float = 1e-3, seed: int = 0, gate: bool = True,
                decay: bool = True, callback=None, optimizer: str = "adam") -> FitResult:
    """Standalone gradient descent on the weighted wavelet regularizers.

    The learning rate decays linearly to zero when ``decay`` is set, which
    lets the L1-type penalties settle instead of chattering at step size.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    named = list(bank.named_parameters("bank.", include_frozen=False))
    named += list(thresholds.named_parameters("thresholds.", include_frozen=False))
    opt = make_optimizer(optimizer, named, lr)
    history = []
    for step in range(steps):
        idx = rng.integers(0, len(corpus), size=min(batch_size, len(corpus)))
        opt.lr = lr * (1.0 - step / steps) if decay else lr
        opt.zero_grad()
        total, regs = wavelet_objective(bank, thresholds, Tensor(corpus[idx]), weights, gate)
        vals = {k: v.item() for k, v in regs.items()}
        if not all(np.isfinite(v) for v in vals.values()):
            bad = [k for k, v in vals.items() if not np.isfinite(v)]
            raise DivergenceError(f"wavelet regularizer became non-finite at step {step}: {bad}")
        total.backward()
        opt.step()
        rec = {"step": step, "total": total.item(), **vals}
        history.append(rec)
        if callback is not None:
            callback(rec)
    with no_grad():
        regs = {k: v.item() for k, v in wavelet_regs(bank.h_lp).items()}
    return FitResult(bank.h_lp.data.copy(), thresholds.gammas().data.copy(), regs, history)


def mean_terminal_l1(images: np.ndarray, h_lp, L: int) -> float:
    """Average per-image terminal-coefficient L1 of the ungated packet tree."""
    with no_grad():
        tree = wpt_analyze_full(Tensor(np.asarray(images, dtype=np.float64)), np.asarray(h_lp), L)
        return float(sum(np.abs(y.data).sum() for y in tree.subbands) / len(images))
