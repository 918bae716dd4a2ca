"""Multi-stream forcing trainer.

One :class:`Trainer` owns the backbone, the filter bank and thresholds, the
optimizer and the random stream. A step samples a batch and the clocks,
builds every stream's clean target (raw pixels, the embedded low-pass
image, the semantic stand-in), noises them, runs the backbone and takes
one optimizer step on the weighted x-prediction losses plus the wavelet
regularizers.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import wavelet as wv
from .backbone import Backbone, clone_and_freeze_patch_embed
from .config import RunConfig
from .data import ImageSet, dataset_synthesize
from .flow import interpolate, sample_training_clocks, total_loss, xpred_loss
from .nn import make_optimizer, param_hash
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "loss_total", "loss_pix", "loss_fre", "loss_dino",
    "L_sum", "L_hp", "L_ortho", "L_sparse",
    "t_pix", "t_fre", "t_dino",
    "eval_pix", "eval_fre", "eval_dino",
)

AUX_SEED_OFFSET = 7919
EVAL_SEED_OFFSET = 10007


class DivergenceError(FloatingPointError):
    pass


# -- fixed low-pass operators and the semantic stand-in ------------------------------

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_axis(x: np.ndarray, axis: int, taps: np.ndarray = _BINOMIAL) -> np.ndarray:
    r = len(taps) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="reflect")
    n = x.shape[axis]
    out = np.zeros_like(x)
    for i, w in enumerate(taps):
        out += w * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(x: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur over the last two axes, reflect borders."""
    return _blur_axis(_blur_axis(x, -1), -2)


def laplacian_lowfreq(x, s: int) -> np.ndarray:
    """Gaussian-pyramid base band: blur+decimate down to s x s, then expand back."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    H, W = x.shape[-2:]
    L = wv.lowpass_depth(H, W, s)
    sizes = []
    c = x
    for _ in range(L):
        sizes.append(c.shape[-2:])
        c = gaussian_blur(c)[..., ::2, ::2]
    for h, w in reversed(sizes):
        up = np.zeros(c.shape[:-2] + (h, w))
        up[..., ::2, ::2] = c
        c = 4.0 * gaussian_blur(up)
    return c


def semantic_standin(x, labels, seed: int, patch: int, dim: int) -> np.ndarray:
    """Deterministic class-aware token latent standing in for a pretrained encoder.

    Heavily blurred patches plus a per-class code are projected by a fixed
    random orthonormal map and standardized per image over the grid.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    labels = np.broadcast_to(np.asarray(labels).reshape(-1), (x.shape[0],))
    B, C, H, W = x.shape
    blurred = x
    for _ in range(3):
        blurred = gaussian_blur(blurred)
    g, h = H // patch, W // patch
    feats = blurred.reshape(B, C, g, patch, h, patch).transpose(0, 2, 4, 3, 5, 1).reshape(B, g * h, -1)
    rng = np.random.default_rng(seed)
    fdim = feats.shape[-1]
    q, _ = np.linalg.qr(rng.normal(size=(fdim, max(fdim, dim))))
    proj = q[:, :dim] if fdim >= dim else np.linalg.qr(rng.normal(size=(dim, fdim)))[0].T
    codes = rng.normal(size=(int(labels.max()) + 1, fdim))
    z = (feats + codes[labels][:, None, :]) @ proj
    z = (z - z.mean(axis=(1, 2), keepdims=True)) / z.std(axis=(1, 2), keepdims=True)
    return z[0] if single else z


# -- trainer --------------------------------------------------------------------------


@dataclass
class StreamSample:
    stream_id: str
    x_clean: Tensor
    noise: np.ndarray
    t: np.ndarray
    z: Tensor


class Trainer:
    def __init__(self, cfg: RunConfig, data: ImageSet | None = None, eval_data: ImageSet | None = None):
        self.cfg = cfg
        tr = cfg.train
        if data is None:
            d = cfg.data
            data = dataset_synthesize(d.kind, d.n, d.seed, d.size, d.path or None)
        if eval_data is None:
            d = cfg.data
            if d.kind == "folder":
                eval_data = ImageSet(data.images[: d.eval_n], data.labels[: d.eval_n], data.num_classes)
            else:
                eval_data = dataset_synthesize(d.kind, d.eval_n, d.seed + EVAL_SEED_OFFSET, d.size)
        self.data, self.eval_data = data, eval_data
        self.streams = cfg.streams
        self.model = Backbone(cfg.backbone(data.num_classes, data.images.shape[1]), seed=tr.seed)
        w = cfg.wavelet
        basis = cfg.ablation.fixed_basis
        learn = basis == "learned" and w.joint and "fre" in self.streams
        if basis == "haar":
            self.bank = wv.FilterBank(wv.HAAR, a=w.a, trainable=False)
        else:
            self.bank = wv.FilterBank(parse_filter(w.init_filter, w.K), a=w.a, trainable=learn)
        self.thresholds = wv.Thresholds(w.L, w.gamma_init)
        if not learn:
            self.thresholds.freeze()
        self.learn_filter = learn
        self.schedule = cfg.schedule()
        self.weights = cfg.loss_weights()
        self.reg_weights = cfg.reg_weights()
        self.rng = np.random.default_rng(tr.seed)
        self.aux_rng = np.random.default_rng(tr.seed + AUX_SEED_OFFSET)
        self.step_count = 0
        self.optimizer = make_optimizer(tr.optimizer, self.named_trainable(), tr.lr, tr.momentum)
        self._eval_fixed = self._build_eval_fixed()

    # -- parameters --------------------------------------------------------

    def named_trainable(self):
        out = list(self.model.named_parameters("model.", include_frozen=False))
        out += list(self.bank.named_parameters("bank.", include_frozen=False))
        out += list(self.thresholds.named_parameters("thresholds.", include_frozen=False))
        return out

    def named_state(self):
        out = list(self.model.named_parameters("model."))
        out += list(self.bank.named_parameters("bank."))
        out += list(self.thresholds.named_parameters("thresholds."))
        return out

    def zero_grad(self):
        for _, p in self.named_state():
            p.grad = None

    # -- targets -------------------------------------------------------------

    def lowpass(self, images) -> Tensor:
        s = self.cfg.wavelet.lowfreq_size
        if self.cfg.ablation.fixed_basis == "laplacian":
            return Tensor(laplacian_lowfreq(images, s))
        return wv.extract_lowfreq(images, self.bank, s)

    def freq_branch_targets(self, images) -> tuple[Tensor, dict]:
        """Frequency-stream clean target; stopgrad through the tied embedding before the freeze."""
        x_lp = self.lowpass(images)
        x_fre = self.model.encode_target(x_lp)
        return x_fre, {"x_lp": x_lp, "frozen": self.model.frozen_copy}

    def semantic_target(self, images, labels) -> np.ndarray:
        m = self.model.cfg
        return semantic_standin(images, labels, self.cfg.train.seed, m.patch, m.dino_dim)

    def targets(self, images, labels, rng) -> dict:
        out = {"pix": Tensor(images)}
        if "fre" in self.streams:
            if self.cfg.ablation.random_aux_latent:
                out["fre"] = Tensor(rng.standard_normal(self.model.stream_shape("fre", len(images))))
            else:
                out["fre"] = self.freq_branch_targets(Tensor(images))[0]
        if "dino" in self.streams:
            out["dino"] = Tensor(self.semantic_target(images, labels))
        return out

    def build_samples(self, targets: dict, clocks: dict, rng) -> dict[str, StreamSample]:
        samples = {}
        for s in self.streams:
            x = targets[s]
            noise = rng.standard_normal(x.shape)
            samples[s] = StreamSample(s, x, noise, clocks[s], interpolate(x, noise, clocks[s]))
        return samples

    def sample_weight(self, stream: str, t_pix, t_stream) -> np.ndarray | None:
        """Per-sample loss weight; zero where an auxiliary clock has already reached 1.

        A saturated stream is clean by definition and the sampler never uses
        its prediction, so its clipped loss would only train an identity map.
        """
        w = self.weights.time_weight(stream, t_pix)
        if stream != "pix" and self.cfg.flow.skip_saturated:
            live = (np.asarray(t_stream) < 1.0).astype(np.float64)
            w = live if w is None else w * live
        return w

    def stream_losses(self, samples, preds) -> dict:
        t_pix = samples["pix"].t
        out = {}
        for s, smp in samples.items():
            w = self.sample_weight(s, t_pix, smp.t)
            out[s] = xpred_loss(preds[s], smp.x_clean, smp.z, smp.t, self.weights.t_clip, weight=w)
        return out

    def regularizers(self, images, sparse: bool = True) -> dict:
        """Wavelet regularizer values; differentiable only when the filter is learned."""
        L = self.cfg.wavelet.L
        if self.cfg.ablation.fixed_basis == "laplacian":
            return {}
        regs = wv.wavelet_regs(self.bank.h_lp)
        gam = self.thresholds.gammas()
        if sparse and self.bank.K * 2 ** (L - 1) <= min(images.shape[-2:]):
            regs["sparse"] = wv.reg_sparse(wv.wpt_analyze_full(Tensor(images), self.bank, L, gam, self.bank.a))
        return regs

    # -- stepping ---------------------------------------------------------------

    def maybe_freeze(self) -> None:
        if "fre" in self.streams and not self.model.frozen_copy and self.step_count >= self.cfg.freeze_step:
            clone_and_freeze_patch_embed(self.model)

    def learning_rate(self, step: int) -> float:
        tr = self.cfg.train
        if tr.lr_schedule == "linear":
            return tr.lr * (1.0 - step / tr.steps)
        return tr.lr

    def train_step(self, batch=None) -> dict:
        """One optimizer step; returns the metrics record."""
        cfg = self.cfg
        self.maybe_freeze()
        rng = self.rng
        if batch is None:
            idx = rng.integers(0, len(self.data), size=cfg.train.batch_size)
            batch = self.data.batch(idx)
        images, labels = batch
        B = len(images)
        labels = np.array(labels, dtype=np.int64)
        drop = rng.uniform(size=B) < cfg.train.class_dropout
        cond_labels = np.where(drop, self.model.null_class, labels)
        clocks = sample_training_clocks(rng, self.schedule, self.streams, B,
                                        cfg.ablation.independent_clock_sampling)
        targets = self.targets(images, labels, self.aux_rng)
        samples = self.build_samples(targets, clocks, rng)
        preds = self.model({s: smp.z for s, smp in samples.items()}, clocks, cond_labels)
        losses = self.stream_losses(samples, preds)
        if self.learn_filter:
            regs = self.regularizers(images)
        else:
            # With a fixed basis the sparsity term is only a diagnostic, so the
            # packet tree is evaluated on eval steps alone.
            on_eval = (self.step_count + 1) % cfg.train.eval_every == 0
            with no_grad():
                regs = self.regularizers(images, sparse=on_eval)
        total = total_loss(losses, self.weights, regs if self.learn_filter else None, self.reg_weights)
        for name, val in [("total", total), *losses.items(), *regs.items()]:
            if not np.isfinite(val.item()):
                raise DivergenceError(f"non-finite {name} loss at step {self.step_count}")
        self.zero_grad()
        if total.requires_grad:
            total.backward()
        grad_norm = clip_grad_norm([p for _, p in self.named_trainable()], cfg.train.grad_clip)
        self.optimizer.lr = self.learning_rate(self.step_count)
        self.optimizer.step()
        self.step_count += 1
        rec = {"step": self.step_count, "loss_total": total.item()}
        for s in ("pix", "fre", "dino"):
            rec[f"loss_{s}"] = losses[s].item() if s in losses else None
            rec[f"t_{s}"] = float(np.mean(clocks[s])) if s in clocks else None
        for k in ("sum", "hp", "ortho", "sparse"):
            rec[f"L_{k}"] = regs[k].item() if k in regs else None
        rec["clocks"] = clocks
        rec["grad_norm"] = grad_norm
        return rec

    # -- evaluation -------------------------------------------------------------

    def _build_eval_fixed(self) -> dict:
        rng = np.random.default_rng(self.cfg.train.seed + EVAL_SEED_OFFSET)
        n = len(self.eval_data)
        t_pix = rng.uniform(size=n)
        noise = {s: rng.standard_normal(self.model.stream_shape(s, n)) for s in ("pix", "fre", "dino")}
        aux = rng.standard_normal(self.model.stream_shape("fre", n))
        return {"t_pix": t_pix, "noise": noise, "aux": aux}

    def evaluate(self, batch_size: int = 16) -> dict:
        """Held-out per-stream loss on fixed samples, clocks and noise."""
        fx = self._eval_fixed
        ev = self.eval_data
        sums = {s: 0.0 for s in self.streams}
        n = len(ev)
        with no_grad():
            for start in range(0, n, batch_size):
                sl = slice(start, min(n, start + batch_size))
                images, labels = ev.images[sl], ev.labels[sl]
                t_pix = fx["t_pix"][sl]
                clocks = {s: self.schedule.phi(s)(t_pix) for s in self.streams}
                if "fre" in self.streams and self.cfg.ablation.random_aux_latent:
                    targets = {"pix": Tensor(images), "fre": Tensor(fx["aux"][sl])}
                    if "dino" in self.streams:
                        targets["dino"] = Tensor(self.semantic_target(images, labels))
                else:
                    targets = self.targets(images, labels, None)
                states = {s: interpolate(targets[s], fx["noise"][s][sl], clocks[s]) for s in self.streams}
                preds = self.model(states, clocks, labels)
                for s in self.streams:
                    w = self.sample_weight(s, t_pix, clocks[s])
                    l = xpred_loss(preds[s], targets[s], states[s], clocks[s], self.weights.t_clip, weight=w)
                    sums[s] += l.item() * len(images)
        return {s: v / n for s, v in sums.items()}

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        from .checkpoint import save_trainer

        save_trainer(self, path)

    @classmethod
    def load(cls, path, data: ImageSet | None = None, eval_data: ImageSet | None = None) -> "Trainer":
        from .checkpoint import load_trainer

        return load_trainer(path, data, eval_data)

    def frequency_embed_hash(self) -> str | None:
        return param_hash(self.model.target_embed) if self.model.target_embed is not None else None


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` disables clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def parse_filter(text: str, K: int) -> np.ndarray:
    """``haar`` / ``db2`` / comma-separated taps / a file of taps, zero-padded to K."""
    text = text.strip()
    if text == "haar":
        h = wv.HAAR
    elif text == "db2":
        h = wv.DB2
    elif text.startswith("random"):
        seed = int(text.split(":", 1)[1]) if ":" in text else 0
        return near_orthogonal_filter(K, seed)
    elif "," in text or _is_float(text):
        h = np.array([float(v) for v in text.split(",")])
    else:
        h = np.loadtxt(text, ndmin=1)
    if len(h) > K:
        raise ValueError(f"filter has {len(h)} taps, longer than K={K}")
    return np.pad(h, (0, K - len(h)))


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def near_orthogonal_filter(K: int, seed: int, noise: float = 0.1) -> np.ndarray:
    """Random orthonormal (paraunitary) low-pass filter perturbed by ``noise``.

    Built from the lattice parameterization with random angles summing to
    pi/4, so the unperturbed filter satisfies all three wavelet constraints.
    """
    rng = np.random.default_rng(seed)
    n = K // 2
    angles = rng.uniform(-np.pi, np.pi, size=n)
    angles[-1] = np.pi / 4 - angles[:-1].sum()
    h = np.array([np.cos(angles[0]), np.sin(angles[0])])
    g = np.array([-np.sin(angles[0]), np.cos(angles[0])])
    for th in angles[1:]:
        c, s = np.cos(th), np.sin(th)
        h_up = np.zeros(len(h) + 2)
        g_up = np.zeros(len(g) + 2)
        h_up[: len(h)] = h
        g_up[2:] = g
        h, g = c * h_up + s * g_up, -s * h_up + c * g_up
    return h + noise * rng.normal(size=K) / np.sqrt(K)


# -- run loop -------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_header(cfg: RunConfig) -> str:
    sched = cfg.schedule().describe()
    return (f"# schedule={sched} streams={','.join(cfg.streams)} basis={cfg.ablation.fixed_basis} "
            f"random_aux_latent={cfg.ablation.random_aux_latent} "
            f"independent_clocks={cfg.ablation.independent_clock_sampling}\n")


def run_training(cfg: RunConfig, out_dir=None, trainer: Trainer | None = None, log_every: int = 0) -> tuple[Trainer, list]:
    """Run (or continue) training; writes ``metrics.csv``, ``timing.csv`` and ``checkpoint.fqfc``."""
    trainer = trainer or Trainer(cfg)
    tr = cfg.train
    rows = []
    timing = []
    t0 = time.perf_counter()
    while trainer.step_count < tr.steps:
        rec = trainer.train_step()
        step = rec["step"]
        if step % tr.eval_every == 0 or step == tr.steps:
            ev = trainer.evaluate()
            for s in ("pix", "fre", "dino"):
                rec[f"eval_{s}"] = ev.get(s)
        rows.append({k: rec.get(k) for k in METRIC_COLUMNS})
        timing.append((step, time.perf_counter() - t0))
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.4f pix %.4f", step, rec["loss_total"], rec["loss_pix"])
        if out_dir is not None and tr.checkpoint_every and step % tr.checkpoint_every == 0 and step < tr.steps:
            trainer.save(Path(out_dir) / f"checkpoint_{step:06d}.fqfc")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", cfg, rows)
        with open(out / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "wall_time"])
            w.writerows((s, f"{t:.6f}") for s, t in timing)
        trainer.save(out / "checkpoint.fqfc")
    return trainer, rows


def write_metrics(path, cfg: RunConfig, rows) -> None:
    buf = io.StringIO()
    buf.write(metrics_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> tuple[str, list[dict]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0] if lines and lines[0].startswith("#") else ""
    body = lines[1:] if header else lines
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
        raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
    return header, list(reader)
