"""Differentiable 2D Gaussian splatting on the unit square.

Primitives are anisotropic Gaussians with position, log standard
deviations, rotation, and logistic-mapped opacity and color. Rendering
alpha-composites them in fixed primitive-index order (a 2D image fit has
no depth to sort by); pixel centers map to normalized coordinates so the
same model renders consistently at any resolution. Forward and backward
passes are sequential numba kernels with fixed reduction order, so
repeated runs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .spectra import Image

__all__ = [
    "Gaussian2D",
    "SplatModel",
    "ParamGrads",
    "AdamState",
    "PARAM_GROUPS",
    "W_MAX",
    "CULL_RADIUS_SIGMA",
    "render",
    "render_loss_grad",
    "adam_step",
    "init_from_image",
    "checkpoint_csv",
    "model_from_checkpoint_csv",
    "CHECKPOINT_HEADER",
]

PARAM_GROUPS = ("pos", "log_scale", "rotation", "opacity_raw", "color_raw")

# Per-pixel weights are clamped below 1 so transmittance never hits exact 0
# and gradients keep flowing through occluded primitives.
W_MAX = 0.999

# Culling window half-width in standard deviations. The neglected tail is
# exp(-CULL^2/2) ~ 3.7e-6 per primitive, far inside the 1e-4 equivalence
# contract between culled and unculled rendering.
CULL_RADIUS_SIGMA = 5.0

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

CHECKPOINT_HEADER = "index,px,py,ls0,ls1,rot,op,r,g,b"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-3, 1.0 - 1e-3)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class Gaussian2D:
    """One primitive: raw (unconstrained) parameters."""

    pos: np.ndarray         # (2,) in normalized [0,1]^2 coordinates
    log_scale: np.ndarray   # (2,) log std devs in normalized units
    rotation: float         # radians
    opacity_raw: float      # logistic-mapped to (0, 1)
    color_raw: np.ndarray   # (3,) logistic-mapped to (0, 1)

    @property
    def opacity(self) -> float:
        return float(_sigmoid(np.array([self.opacity_raw]))[0])

    @property
    def color(self) -> np.ndarray:
        return _sigmoid(np.asarray(self.color_raw, dtype=np.float64))

    @property
    def covariance(self) -> np.ndarray:
        """R diag(exp(2*log_scale)) R^T; positive definite by construction."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        var = np.exp(2.0 * np.asarray(self.log_scale, dtype=np.float64))
        return rot @ np.diag(var) @ rot.T


@dataclass
class SplatModel:
    """Ordered primitive collection; index order is the compositing order."""

    pos: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_raw: np.ndarray
    color_raw: np.ndarray

    def __post_init__(self) -> None:
        self.pos = np.ascontiguousarray(self.pos, dtype=np.float64)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=np.float64)
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.opacity_raw = np.ascontiguousarray(self.opacity_raw, dtype=np.float64)
        self.color_raw = np.ascontiguousarray(self.color_raw, dtype=np.float64)
        n = self.pos.shape[0]
        if n < 1:
            raise ValueError("a splat model needs at least one primitive")
        if (
            self.pos.shape != (n, 2)
            or self.log_scale.shape != (n, 2)
            or self.rotation.shape != (n,)
            or self.opacity_raw.shape != (n,)
            or self.color_raw.shape != (n, 3)
        ):
            raise ValueError("inconsistent parameter array shapes")

    @property
    def count(self) -> int:
        return self.pos.shape[0]

    def opacity(self) -> np.ndarray:
        return _sigmoid(self.opacity_raw)

    def color(self) -> np.ndarray:
        return _sigmoid(self.color_raw)

    def sigma(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def primitive(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            pos=self.pos[i].copy(),
            log_scale=self.log_scale[i].copy(),
            rotation=float(self.rotation[i]),
            opacity_raw=float(self.opacity_raw[i]),
            color_raw=self.color_raw[i].copy(),
        )

    @classmethod
    def from_primitives(cls, primitives: Sequence[Gaussian2D]) -> "SplatModel":
        return cls(
            pos=np.array([p.pos for p in primitives], dtype=np.float64),
            log_scale=np.array([p.log_scale for p in primitives], dtype=np.float64),
            rotation=np.array([p.rotation for p in primitives], dtype=np.float64),
            opacity_raw=np.array([p.opacity_raw for p in primitives], dtype=np.float64),
            color_raw=np.array([p.color_raw for p in primitives], dtype=np.float64),
        )

    def copy(self) -> "SplatModel":
        return SplatModel(
            self.pos.copy(),
            self.log_scale.copy(),
            self.rotation.copy(),
            self.opacity_raw.copy(),
            self.color_raw.copy(),
        )

    def take(self, indices: np.ndarray) -> "SplatModel":
        return SplatModel(
            self.pos[indices],
            self.log_scale[indices],
            self.rotation[indices],
            self.opacity_raw[indices],
            self.color_raw[indices],
        )


@dataclass
class ParamGrads:
    """Loss gradients, one array per parameter group, shapes match the model."""

    pos: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_raw: np.ndarray
    color_raw: np.ndarray

    @classmethod
    def zeros_like(cls, model: SplatModel) -> "ParamGrads":
        return cls(
            pos=np.zeros_like(model.pos),
            log_scale=np.zeros_like(model.log_scale),
            rotation=np.zeros_like(model.rotation),
            opacity_raw=np.zeros_like(model.opacity_raw),
            color_raw=np.zeros_like(model.color_raw),
        )


@dataclass
class AdamState:
    """First/second moment accumulators per parameter group.

    Rows track the live primitive set: pruning drops rows, densification
    appends zeroed rows for the new primitives.
    """

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model: SplatModel) -> "AdamState":
        state = cls()
        for name in PARAM_GROUPS:
            arr = getattr(model, name)
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state

    def take_rows(self, indices: np.ndarray) -> None:
        for name in PARAM_GROUPS:
            self.m[name] = self.m[name][indices]
            self.v[name] = self.v[name][indices]

    def append_rows(self, n_new: int) -> None:
        if n_new <= 0:
            return
        for name in PARAM_GROUPS:
            pad = np.zeros((n_new,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad], axis=0)
            self.v[name] = np.concatenate([self.v[name], pad], axis=0)


# ---------------------------------------------------------------------------
# Rasterization kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _composite_forward(
    pos, axx, axy, ayy, opac, color, y0, y1, x0, x1, height, width, img, trans
):
    n = pos.shape[0]
    for i in range(n):
        px = pos[i, 0]
        py = pos[i, 1]
        o = opac[i]
        a = axx[i]
        b = axy[i]
        c = ayy[i]
        cr = color[i, 0]
        cg = color[i, 1]
        cb = color[i, 2]
        for yy in range(y0[i], y1[i]):
            dy = (yy + 0.5) / height - py
            for xx in range(x0[i], x1[i]):
                dx = (xx + 0.5) / width - px
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                w = o * math.exp(-0.5 * q)
                if w > W_MAX:
                    w = W_MAX
                t = trans[yy, xx]
                tw = t * w
                img[yy, xx, 0] += tw * cr
                img[yy, xx, 1] += tw * cg
                img[yy, xx, 2] += tw * cb
                trans[yy, xx] = t * (1.0 - w)


@njit(cache=True)
def _composite_backward(
    pos, axx, axy, ayy, opac, color, cos_t, sin_t, s0sq, s1sq,
    y0, y1, x0, x1, height, width, dldc, trans,
    g_pos, g_ls, g_rot, g_opac, g_color,
):
    # Walks primitives back to front, peeling each one's (1 - w) factor off
    # the running transmittance and growing the suffix contribution sum, so
    # per-primitive T_i and the downstream sensitivity are recovered exactly
    # as composited. All reductions run in fixed pixel order.
    n = pos.shape[0]
    suffix = np.zeros((height, width, 3))
    for i in range(n - 1, -1, -1):
        px = pos[i, 0]
        py = pos[i, 1]
        o = opac[i]
        a = axx[i]
        b = axy[i]
        c = ayy[i]
        cr = color[i, 0]
        cg = color[i, 1]
        cb = color[i, 2]
        ct = cos_t[i]
        st = sin_t[i]
        v0 = s0sq[i]
        v1 = s1sq[i]
        for yy in range(y0[i], y1[i]):
            dy = (yy + 0.5) / height - py
            for xx in range(x0[i], x1[i]):
                dx = (xx + 0.5) / width - px
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                g = math.exp(-0.5 * q)
                og = o * g
                clamped = og >= W_MAX
                w = W_MAX if clamped else og
                om = 1.0 - w
                t_i = trans[yy, xx] / om
                d0 = dldc[yy, xx, 0]
                d1 = dldc[yy, xx, 1]
                d2 = dldc[yy, xx, 2]
                s0 = suffix[yy, xx, 0]
                s1 = suffix[yy, xx, 1]
                s2 = suffix[yy, xx, 2]
                tw = t_i * w
                g_color[i, 0] += d0 * tw
                g_color[i, 1] += d1 * tw
                g_color[i, 2] += d2 * tw
                if not clamped:
                    gw = (
                        d0 * (t_i * cr - s0 / om)
                        + d1 * (t_i * cg - s1 / om)
                        + d2 * (t_i * cb - s2 / om)
                    )
                    g_opac[i] += gw * g
                    dldq = -0.5 * gw * og
                    ex = a * dx + b * dy
                    ey = b * dx + c * dy
                    g_pos[i, 0] += dldq * (-2.0 * ex)
                    g_pos[i, 1] += dldq * (-2.0 * ey)
                    h0 = ct * ex + st * ey
                    h1 = -st * ex + ct * ey
                    g_ls[i, 0] += dldq * (-2.0 * v0 * h0 * h0)
                    g_ls[i, 1] += dldq * (-2.0 * v1 * h1 * h1)
                    g_rot[i] += dldq * (-2.0 * (ey * dx - ex * dy))
                suffix[yy, xx, 0] = s0 + tw * cr
                suffix[yy, xx, 1] = s1 + tw * cg
                suffix[yy, xx, 2] = s2 + tw * cb
                trans[yy, xx] = t_i


def _precompute(model: SplatModel):
    c = np.cos(model.rotation)
    s = np.sin(model.rotation)
    s0sq = np.exp(2.0 * model.log_scale[:, 0])
    s1sq = np.exp(2.0 * model.log_scale[:, 1])
    sig_xx = c * c * s0sq + s * s * s1sq
    sig_xy = c * s * (s0sq - s1sq)
    sig_yy = s * s * s0sq + c * c * s1sq
    det = s0sq * s1sq
    axx = sig_yy / det
    axy = -sig_xy / det
    ayy = sig_xx / det
    return axx, axy, ayy, s0sq, s1sq, c, s, sig_xx, sig_yy


def _windows(model, sig_xx, sig_yy, height, width, culling):
    n = model.count
    if not culling:
        zero = np.zeros(n, dtype=np.int64)
        return (
            zero,
            np.full(n, height, dtype=np.int64),
            zero.copy(),
            np.full(n, width, dtype=np.int64),
        )
    rx = CULL_RADIUS_SIGMA * np.sqrt(sig_xx)
    ry = CULL_RADIUS_SIGMA * np.sqrt(sig_yy)
    px = model.pos[:, 0]
    py = model.pos[:, 1]
    x0 = np.clip(np.ceil(width * (px - rx) - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(width * (px + rx) - 0.5) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.ceil(height * (py - ry) - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(height * (py + ry) - 0.5) + 1, 0, height).astype(np.int64)
    return y0, y1, x0, x1


def _forward_raw(model: SplatModel, width: int, height: int, culling: bool):
    axx, axy, ayy, _, _, _, _, sig_xx, sig_yy = _precompute(model)
    y0, y1, x0, x1 = _windows(model, sig_xx, sig_yy, height, width, culling)
    img = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    _composite_forward(
        model.pos, axx, axy, ayy, model.opacity(), model.color(),
        y0, y1, x0, x1, height, width, img, trans,
    )
    return img, trans


def render(model: SplatModel, width: int, height: int, culling: bool = True) -> Image:
    """Alpha-composite the model onto a width x height grid, black background.

    Pixel centers map to ((x+0.5)/width, (y+0.5)/height); output values lie
    in [0, 1) by construction. Results are bit-identical across calls.
    """
    if width < 1 or height < 1:
        raise ValueError("render target must be at least 1x1")
    img, _ = _forward_raw(model, width, height, culling)
    return Image.from_array(img)


def _target3(target: Image) -> np.ndarray:
    if target.channels == 3:
        return target.data
    return np.broadcast_to(target.data, (target.height, target.width, 3))


def render_loss_grad(
    model: SplatModel,
    target: Image,
    width: int | None = None,
    height: int | None = None,
    culling: bool = True,
):
    """Mean-absolute-error loss against ``target`` plus analytic gradients.

    Returns ``(loss, ParamGrads, pos_grad_mag)`` where ``pos_grad_mag`` is
    the per-primitive 2-norm of the positional gradient, the densification
    score contribution for this step. A single-channel target is compared
    against all three rendered channels.
    """
    h, w = target.height, target.width
    if width is not None and width != w or height is not None and height != h:
        raise ValueError(
            f"target is {h}x{w} but render extent is {height}x{width}"
        )
    img, trans = _forward_raw(model, w, h, culling)
    gt = _target3(target)
    diff = img - gt
    loss = float(np.mean(np.abs(diff)))
    dldc = np.sign(diff) / diff.size

    axx, axy, ayy, s0sq, s1sq, cos_t, sin_t, sig_xx, sig_yy = _precompute(model)
    y0, y1, x0, x1 = _windows(model, sig_xx, sig_yy, h, w, culling)
    grads = ParamGrads.zeros_like(model)
    g_opac = np.zeros(model.count)
    g_color = np.zeros((model.count, 3))
    opac = model.opacity()
    color = model.color()
    _composite_backward(
        model.pos, axx, axy, ayy, opac, color, cos_t, sin_t, s0sq, s1sq,
        y0, y1, x0, x1, h, w, dldc, trans,
        grads.pos, grads.log_scale, grads.rotation, g_opac, g_color,
    )
    # Chain the logistic maps back to the raw parameters.
    grads.opacity_raw[:] = g_opac * opac * (1.0 - opac)
    grads.color_raw[:] = g_color * color * (1.0 - color)
    pos_grad_mag = np.hypot(grads.pos[:, 0], grads.pos[:, 1])
    return loss, grads, pos_grad_mag


def adam_step(
    model: SplatModel,
    state: AdamState,
    grads: ParamGrads,
    lr: Mapping[str, float],
) -> None:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) in place."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - _ADAM_BETA1**t
    bias2 = 1.0 - _ADAM_BETA2**t
    for name in PARAM_GROUPS:
        g = getattr(grads, name)
        p = getattr(model, name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= _ADAM_BETA1
        m += (1.0 - _ADAM_BETA1) * g
        v *= _ADAM_BETA2
        v += (1.0 - _ADAM_BETA2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p -= lr[name] * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


def init_from_image(target: Image, p_init: int, seed: int) -> SplatModel:
    """Seeded model: stratified-random positions colored from the target.

    Initial std dev is isotropic 1/sqrt(p_init) in normalized units and
    mapped opacity starts at 0.1. Deterministic given the seed.
    """
    if p_init < 1:
        raise ValueError("initial primitive count must be >= 1")
    rng = np.random.default_rng(seed)
    grid = int(math.ceil(math.sqrt(p_init)))
    cells = np.arange(p_init)
    jitter = rng.random((p_init, 2))
    px = ((cells % grid) + jitter[:, 0]) / grid
    py = ((cells // grid) + jitter[:, 1]) / grid
    pos = np.stack([px, py], axis=1)

    xs = np.minimum((px * target.width).astype(np.int64), target.width - 1)
    ys = np.minimum((py * target.height).astype(np.int64), target.height - 1)
    sampled = _target3(target)[ys, xs, :]

    return SplatModel(
        pos=pos,
        log_scale=np.full((p_init, 2), -0.5 * math.log(p_init)),
        rotation=np.zeros(p_init),
        opacity_raw=np.full(p_init, _logit(np.array([0.1]))[0]),
        color_raw=_logit(sampled),
    )


def checkpoint_csv(model: SplatModel) -> str:
    """Canonical text serialization: one row per primitive, 9 significant digits."""
    lines = [CHECKPOINT_HEADER]
    for i in range(model.count):
        vals = (
            model.pos[i, 0], model.pos[i, 1],
            model.log_scale[i, 0], model.log_scale[i, 1],
            model.rotation[i], model.opacity_raw[i],
            model.color_raw[i, 0], model.color_raw[i, 1], model.color_raw[i, 2],
        )
        lines.append(str(i) + "," + ",".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + "\n"


def model_from_checkpoint_csv(text: str) -> SplatModel:
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError("malformed checkpoint: missing header")
    rows = [[float(x) for x in ln.split(",")[1:]] for ln in lines[1:]]
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 9:
        raise ValueError("malformed checkpoint: expected 9 value columns")
    return SplatModel(
        pos=arr[:, 0:2],
        log_scale=arr[:, 2:4],
        rotation=arr[:, 4],
        opacity_raw=arr[:, 5],
        color_raw=arr[:, 6:9],
    )
