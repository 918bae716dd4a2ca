"""Fast in-package invariant checks, runnable without pytest."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import wavelet as wv
from .backbone import Backbone, BackboneConfig
from .flow import CLOCK_KINDS, ClockMap, xpred_loss, xpred_loss_velocity_form
from .tensor import Tensor


def check_perfect_reconstruction() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for h in (wv.HAAR, wv.DB2):
        for _ in range(5):
            x = rng.normal(size=(2, 16, 12))
            tree = wv.wpt_analyze_full(x, h, 2)
            y = wv.wpt_synthesize_full(tree, h, x.shape[-2:])
            worst = max(worst, float(np.abs(y.data - x).max()))
    assert worst < 1e-7, worst
    return f"max reconstruction error {worst:.2e}"


def check_regularizers() -> str:
    vals = [v.item() for h in (wv.HAAR, wv.DB2) for v in wv.wavelet_regs(h).values()]
    assert max(vals) < 1e-10, vals
    return f"max regularizer on Haar/db2 {max(vals):.2e}"


def check_conv_gradients() -> str:
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    err = T.grad_check(lambda: (T.conv2d_depthwise_stride2(x, k) ** 2).sum(), [x, k])
    assert err < 1e-4, err
    return f"conv finite-difference relative error {err:.2e}"


def check_loss_identity() -> str:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        x, xp, z = (rng.normal(size=(3, 4)) for _ in range(3))
        t = rng.uniform(0.9, 1.0, size=3)
        a = xpred_loss(xp, x, z, t).item()
        b = xpred_loss_velocity_form(xp, x, z, t).item()
        worst = max(worst, abs(a - b))
    assert worst < 1e-10, worst
    return f"loss forms differ by at most {worst:.2e}"


def check_schedules() -> str:
    t = np.linspace(0, 1, 1001)
    for kind, p in zip(CLOCK_KINDS[1:], (0.5, 0.25, 3.0)):
        phi = ClockMap(kind, p)(t)
        assert np.all(np.diff(phi) >= 0) and np.all(phi >= t) and phi[-1] == 1.0, kind
    return "all clock maps monotone, ahead of the pixel clock, ending at 1"


def check_mask_causality() -> str:
    cfg = BackboneConfig(image_size=8, patch=4, width=16, depth=2, heads=2, streams=("dino", "fre", "pix"), dino_dim=4)
    model = Backbone(cfg, seed=0, zero_init=False)
    rng = np.random.default_rng(3)
    states = {s: rng.normal(size=model.stream_shape(s, 2)) for s in cfg.streams}
    t = {s: np.full(2, 0.3) for s in cfg.streams}
    base = model(states, t, [0, 1])
    bumped = dict(states, pix=states["pix"] + 1.0)
    out = model(bumped, t, [0, 1])
    for s in ("dino", "fre"):
        assert np.array_equal(base[s].data, out[s].data), s
    return "pixel perturbation leaves earlier streams bit-identical"


CHECKS = [
    check_perfect_reconstruction,
    check_regularizers,
    check_conv_gradients,
    check_loss_identity,
    check_schedules,
    check_mask_causality,
]


def run(echo=print) -> bool:
    ok = True
    for check in CHECKS:
        name = check.__name__.removeprefix("check_")
        try:
            echo(f"PASS {name}: {check()}")
        except AssertionError as exc:
            ok = False
            echo(f"FAIL {name}: {exc}")
    return ok
