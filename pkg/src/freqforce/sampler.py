"""Multi-clock Euler sampler with classifier-free guidance.

The pixel clock runs on the uniform grid ``t_i = i / N``. Every auxiliary
stream holds its own clock ``tau_m = phi_m(t_i)`` and takes the Euler step
``tau_m(t_{i+1}) - tau_m(t_i)`` with its own velocity, so a stream whose
clock already reached 1 takes zero-length steps and stays fixed.

Trajectory dumps (``.fqtr``), little-endian::

    bytes 0..3    magic b"FQTR"
    bytes 4..7    u32 version (1)
    bytes 8..11   u32 header length n
    bytes 12..    n bytes UTF-8 JSON: {"steps", "shape": [B, C, H, W], "clocks": {stream: [N+1 values]}}
    then          (N+1) * B*C*H*W float64 values: the pixel state before each step and the final sample
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import wavelet as wv
from .backbone import Backbone
from .config import SamplerConfig
from .flow import ClockSchedule
from .tensor import Tensor, no_grad

TRAJ_MAGIC = b"FQTR"
TRAJ_VERSION = 1


def velocity_from_xpred(x_pred, z, t, t_clip: float = 0.05) -> np.ndarray:
    """``(x_pred - z) / max(1 - t, t_clip)`` with ``t`` scalar or per leading sample."""
    x_pred = np.asarray(x_pred.data if isinstance(x_pred, Tensor) else x_pred, dtype=np.float64)
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x_pred.ndim - t.ndim))
    return (x_pred - z) / np.maximum(1.0 - t, t_clip)


def cfg_combine(v_uncond, v_cond, w: float) -> np.ndarray:
    """Guided velocity. ``w = 1`` and ``w = 0`` return the inputs exactly."""
    v_uncond, v_cond = np.asarray(v_uncond), np.asarray(v_cond)
    if v_uncond.shape != v_cond.shape:
        raise ValueError(f"shape mismatch {v_uncond.shape} vs {v_cond.shape}")
    if w == 1:
        return v_cond.copy()
    if w == 0:
        return v_uncond.copy()
    return (1.0 - w) * v_uncond + w * v_cond


@dataclass
class SampleResult:
    images: np.ndarray
    states: dict[str, np.ndarray]
    clock_grid: dict[str, np.ndarray]
    trajectory: list[np.ndarray] = field(default_factory=list)


def clock_grid(schedule: ClockSchedule, streams, N: int) -> dict[str, np.ndarray]:
    t = np.arange(N + 1) / N
    return {s: schedule.phi(s)(t) for s in streams}


def generate(model: Backbone, labels, scfg: SamplerConfig, schedule: ClockSchedule | None = None,
             streams=None, keep_trajectory: bool = False) -> SampleResult:
    """Integrate every stream from noise to data and return the pixel stream.

    ``labels`` is one class per sample. The unconditional pass uses the null
    class and the same states; it is skipped when the guidance scale is 1.
    """
    if model is None:
        raise ValueError("no model loaded")
    schedule = schedule or ClockSchedule()
    streams = tuple(streams or model.cfg.streams)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any((labels < 0) | (labels >= model.cfg.num_classes)):
        raise ValueError(f"class label outside [0, {model.cfg.num_classes})")
    B, N, w = len(labels), scfg.steps, scfg.guidance
    rng = np.random.default_rng(scfg.seed)
    states = {s: rng.standard_normal(model.stream_shape(s, B)) for s in streams}
    grid = clock_grid(schedule, streams, N)
    null = np.full(B, model.null_class)
    traj = []
    with no_grad():
        for i in range(N):
            if keep_trajectory:
                traj.append(states["pix"].copy())
            tau = {s: np.full(B, grid[s][i]) for s in streams}
            inputs = {s: Tensor(states[s]) for s in streams}
            pred_c = model(inputs, tau, labels)
            pred_u = model(inputs, tau, null) if w != 1 else None
            for s in streams:
                dt = grid[s][i + 1] - grid[s][i]
                if dt == 0.0:
                    continue
                v = velocity_from_xpred(pred_c[s], states[s], tau[s], scfg.t_clip)
                if pred_u is not None:
                    v = cfg_combine(velocity_from_xpred(pred_u[s], states[s], tau[s], scfg.t_clip), v, w)
                states[s] = states[s] + dt * v
    if keep_trajectory:
        traj.append(states["pix"].copy())
    return SampleResult(states["pix"], states, grid, traj)


# -- trajectory dumps and the spectral ordering diagnostic -----------------------------


def write_trajectory(path, result: SampleResult) -> None:
    if not result.trajectory:
        raise ValueError("sample was generated without keep_trajectory")
    header = {
        "steps": len(result.trajectory) - 1,
        "shape": list(result.trajectory[0].shape),
        "clocks": {s: g.tolist() for s, g in result.clock_grid.items()},
    }
    text = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC + struct.pack("<II", TRAJ_VERSION, len(text)) + text)
        for st in result.trajectory:
            fh.write(np.ascontiguousarray(st, dtype="<f8").tobytes())


def read_trajectory(path) -> tuple[dict, np.ndarray]:
    """Return ``(header, states[N+1, B, C, H, W])``."""
    buf = Path(path).read_bytes()
    if buf[:4] != TRAJ_MAGIC:
        raise ValueError(f"{path}: not a trajectory dump")
    version, n = struct.unpack("<II", buf[4:12])
    if version != TRAJ_VERSION:
        raise ValueError(f"{path}: trajectory version {version}, expected {TRAJ_VERSION}")
    header = json.loads(buf[12 : 12 + n].decode())
    data = np.frombuffer(buf, dtype="<f8", offset=12 + n).astype(np.float64)
    return header, data.reshape([header["steps"] + 1] + header["shape"])


def lowband_energy(states: np.ndarray, levels: int = 2) -> np.ndarray:
    """Energy of the Haar LL band after ``levels`` steps, per trajectory state."""
    out = []
    for st in states:
        c = Tensor(st)
        for _ in range(levels):
            c = wv.dwt_step(c, wv.HAAR)[0]
        out.append(float(np.sum(c.data**2)))
    return np.array(out)


def lowband_convergence(states: np.ndarray, levels: int = 2) -> np.ndarray:
    """Relative distance of the Haar LL band to its final value along the trajectory."""
    lls = []
    for st in states:
        c = Tensor(st)
        for _ in range(levels):
            c = wv.dwt_step(c, wv.HAAR)[0]
        lls.append(c.data)
    final = lls[-1]
    scale = np.sqrt(np.sum(final**2)) + 1e-12
    return np.array([np.sqrt(np.sum((c - final) ** 2)) / scale for c in lls])


def crossing_time(curve: np.ndarray, level: float = 0.1) -> float:
    """First pixel-clock value after which ``curve`` stays below ``level``."""
    N = len(curve) - 1
    above = np.nonzero(curve > level)[0]
    last = above[-1] + 1 if len(above) else 0
    return min(last, N) / N
