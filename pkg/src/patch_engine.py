"""
Differentiable patch selection.

Coordinates are continuous frame coordinates: the frame spans [0, W] x [0, H]
with the top-left corner at (0, 0), so pixel (r, c) covers [c, c+1) x [r, r+1)
and is centred at (c + 0.5, r + 0.5). A patch of size Hp x Wp centred at
(xc, yc) is sampled on a q x q grid of points

    x(j) = xc + o_j * Wp / q,   o_j = j - q/2 + 0.5

and each point is read with bilinear interpolation between the four
surrounding pixel centres. Corner lookups past the border replicate the edge
pixel, which only happens for points inside the outermost half pixel.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from autodiff import Graph, Tensor, register_op, forward_op, sigmoid, matmul, scale, \
    multiply, add, subtract, global_average_pool, linear, cross_entropy, mean
from error_handler import ShapeError, ValidationError

logger = logging.getLogger(__name__)

_TOL = 1e-9


@dataclass(frozen=True)
class PatchSpec:
    xc: float
    yc: float
    hp: float
    wp: float

    def validate(self, H: int, W: int, p_min: float = 0.0) -> 'PatchSpec':
        checks = {
            'p_min <= Hp <= H': p_min - _TOL <= self.hp <= H + _TOL,
            'p_min <= Wp <= W': p_min - _TOL <= self.wp <= W + _TOL,
            'Wp/2 <= xc <= W - Wp/2': self.wp / 2 - _TOL <= self.xc <= W - self.wp / 2 + _TOL,
            'Hp/2 <= yc <= H - Hp/2': self.hp / 2 - _TOL <= self.yc <= H - self.hp / 2 + _TOL,
        }
        failed = [name for name, ok in checks.items() if not ok]
        if failed:
            raise ValidationError(f"Invalid patch spec {self} for {H}x{W} frame: {failed}")
        return self

    def clamp(self, H: int, W: int, p_min: float = 0.0) -> 'PatchSpec':
        hp = float(np.clip(self.hp, p_min, H))
        wp = float(np.clip(self.wp, p_min, W))
        return PatchSpec(float(np.clip(self.xc, wp / 2, W - wp / 2)),
                         float(np.clip(self.yc, hp / 2, H - hp / 2)), hp, wp)

    def as_array(self) -> np.ndarray:
        return np.array([self.xc, self.yc, self.hp, self.wp], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> 'PatchSpec':
        xc, yc, hp, wp = (float(v) for v in values)
        return cls(xc, yc, hp, wp)


def clamp_specs(values, H: int, W: int, p_min: float = 0.0) -> np.ndarray:
    """Row-wise PatchSpec.clamp of an (N, 4) array"""
    values = np.asarray(values, dtype=np.float64).reshape(-1, 4)
    return np.array([PatchSpec.from_array(v).clamp(H, W, p_min).as_array() for v in values]).reshape(-1, 4)


@dataclass
class CropContext:
    """Sampling record kept for the backward pass"""
    frame_shape: Tuple[int, ...]
    offsets_x: np.ndarray
    offsets_y: np.ndarray
    src_x: np.ndarray
    src_y: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    corners: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


def offset_grid(q: int) -> np.ndarray:
    return np.arange(q, dtype=np.float64) - q / 2.0 + 0.5


def _sample_forward(frames, xc, yc, hp, wp, out_h: int, out_w: int):
    """frames (N,C,H,W); xc..wp (N,1) -> (N,C,out_h,out_w), CropContext"""
    n, c, h, w = frames.shape
    ox = offset_grid(out_w)
    oy = offset_grid(out_h)
    # pixel-index coordinates of each sample point
    src_x = xc + ox[None, :] * (wp / out_w) - 0.5
    src_y = yc + oy[None, :] * (hp / out_h) - 0.5
    fx0 = np.floor(src_x)
    fy0 = np.floor(src_y)
    fx = src_x - fx0
    fy = src_y - fy0
    x0 = np.clip(fx0, 0, w - 1).astype(np.int64)
    x1 = np.clip(fx0 + 1, 0, w - 1).astype(np.int64)
    y0 = np.clip(fy0, 0, h - 1).astype(np.int64)
    y1 = np.clip(fy0 + 1, 0, h - 1).astype(np.int64)

    ft = frames.transpose(0, 2, 3, 1)
    rows = np.arange(n)[:, None, None]
    f00 = ft[rows, y0[:, :, None], x0[:, None, :]]
    f01 = ft[rows, y0[:, :, None], x1[:, None, :]]
    f10 = ft[rows, y1[:, :, None], x0[:, None, :]]
    f11 = ft[rows, y1[:, :, None], x1[:, None, :]]
    wx = fx[:, None, :, None]
    wy = fy[:, :, None, None]
    value = (1 - wy) * ((1 - wx) * f00 + wx * f01) + wy * ((1 - wx) * f10 + wx * f11)
    ctx = CropContext(frames.shape, ox, oy, src_x, src_y, x0, x1, y0, y1, fx, fy, (f00, f01, f10, f11))
    return value.transpose(0, 3, 1, 2), ctx


def _sample_backward(grad, ctx: CropContext, frame_grad: bool = True):
    """grad (N,C,out_h,out_w) -> dframes, dxc, dyc, dhp, dwp"""
    n, c, h, w = ctx.frame_shape
    out_h, out_w = ctx.offsets_y.shape[0], ctx.offsets_x.shape[0]
    if grad.shape != (n, c, out_h, out_w):
        raise ShapeError('bilinear-sample backward', grad.shape, (n, c, out_h, out_w))
    g = grad.transpose(0, 2, 3, 1)
    f00, f01, f10, f11 = ctx.corners
    wx = ctx.fx[:, None, :, None]
    wy = ctx.fy[:, :, None, None]
    dv_dx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
    dv_dy = (1 - wx) * (f10 - f00) + wx * (f11 - f01)
    gx = g * dv_dx
    gy = g * dv_dy
    dxc = gx.sum(axis=(1, 2, 3))[:, None]
    dyc = gy.sum(axis=(1, 2, 3))[:, None]
    dwp = (gx * (ctx.offsets_x / out_w)[None, None, :, None]).sum(axis=(1, 2, 3))[:, None]
    dhp = (gy * (ctx.offsets_y / out_h)[None, :, None, None]).sum(axis=(1, 2, 3))[:, None]

    dframes = None
    if frame_grad:
        dft = np.zeros((n, h, w, c))
        rows = np.arange(n)[:, None, None]
        ys0, ys1 = ctx.y0[:, :, None], ctx.y1[:, :, None]
        xs0, xs1 = ctx.x0[:, None, :], ctx.x1[:, None, :]
        np.add.at(dft, (rows, ys0, xs0), g * (1 - wy) * (1 - wx))
        np.add.at(dft, (rows, ys0, xs1), g * (1 - wy) * wx)
        np.add.at(dft, (rows, ys1, xs0), g * wy * (1 - wx))
        np.add.at(dft, (rows, ys1, xs1), g * wy * wx)
        dframes = dft.transpose(0, 3, 1, 2)
    return dframes, dxc, dyc, dhp, dwp


@register_op('bilinear-sample')
def _bilinear_sample(frames, xc, yc, hp, wp, out_h: int, out_w: int, frame_grad: bool = True):
    if frames.ndim != 4:
        raise ShapeError('bilinear-sample', frames.shape)
    n = frames.shape[0]
    for field in (xc, yc, hp, wp):
        if field.shape != (n, 1):
            raise ShapeError('bilinear-sample', frames.shape, field.shape)
    out, ctx = _sample_forward(frames, xc, yc, hp, wp, out_h, out_w)

    def grad(g):
        return _sample_backward(g, ctx, frame_grad)
    return out, grad


def crop_patches(frames: Tensor, xc: Tensor, yc: Tensor, hp: Tensor, wp: Tensor,
                 out_h: int, out_w: Optional[int] = None) -> Tensor:
    """Batched fused crop-and-resize; every spec field is a (N, 1) tensor"""
    return forward_op('bilinear-sample', frames, xc, yc, hp, wp, out_h=int(out_h),
                      out_w=int(out_w if out_w is not None else out_h),
                      frame_grad=frames.requires_grad)


# single-frame entry points ---------------------------------------------------

def _check_frame(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise ShapeError('crop', frame.shape)
    return frame


def _spec_columns(spec: PatchSpec):
    return tuple(np.array([[v]]) for v in (spec.xc, spec.yc, spec.hp, spec.wp))


def bilinear_crop_forward(frame, spec: PatchSpec, P: int) -> Tuple[np.ndarray, CropContext]:
    """Fixed-size P x P crop of a (C, H, W) frame"""
    frame = _check_frame(frame)
    _, H, W = frame.shape
    fixed = PatchSpec(spec.xc, spec.yc, float(P), float(P)).validate(H, W)
    xc, yc, hp, wp = _spec_columns(fixed)
    out, ctx = _sample_forward(frame[None], xc, yc, hp, wp, P, P)
    return out[0], ctx


def bilinear_crop_backward(dL_dpatch, ctx: CropContext) -> Tuple[float, float, np.ndarray]:
    dL_dpatch = np.asarray(dL_dpatch, dtype=np.float64)
    dframes, dxc, dyc, _, _ = _sample_backward(dL_dpatch[None], ctx)
    return float(dxc[0, 0]), float(dyc[0, 0]), dframes[0]


def deformable_crop(frame, spec: PatchSpec, P: int) -> Tuple[np.ndarray, CropContext]:
    """Hp x Wp window resampled to P x P in a single bilinear pass"""
    frame = _check_frame(frame)
    _, H, W = frame.shape
    spec.validate(H, W)
    xc, yc, hp, wp = _spec_columns(spec)
    out, ctx = _sample_forward(frame[None], xc, yc, hp, wp, P, P)
    return out[0], ctx


def deformable_crop_backward(dL_dpatch, ctx: CropContext):
    """-> (dxc, dyc, dHp, dWp, dframe)"""
    dL_dpatch = np.asarray(dL_dpatch, dtype=np.float64)
    dframes, dxc, dyc, dhp, dwp = _sample_backward(dL_dpatch[None], ctx)
    return float(dxc[0, 0]), float(dyc[0, 0]), float(dhp[0, 0]), float(dwp[0, 0]), dframes[0]


# policy outputs -> patch specs ---------------------------------------------------

def _column(t: Tensor, index: int, width: int) -> Tensor:
    pick = np.zeros((width, 1))
    pick[index, 0] = 1.0
    return matmul(t, t.graph.constant(pick))


def _affine(t: Tensor, factor: float, offset: float) -> Tensor:
    return scale(t, factor) + offset


def policy_to_patch_tensors(raw: Tensor, H: int, W: int, P: int, p_min: float,
                            deformable: bool = True):
    """raw (N, 4) unconstrained -> (xc, yc, hp, wp), each (N, 1).

    Columns are (x, y, height, width). Size is mapped first so the centre range
    can depend on it; in fixed-size mode Hp = Wp = P and only the centre moves.
    """
    if raw.data.ndim != 2 or raw.shape[1] != 4:
        raise ShapeError('policy-to-patch', raw.shape, (None, 4))
    if min(H, W) < p_min:
        raise ValidationError(f"Frame {H}x{W} smaller than minimum patch {p_min}")
    u = sigmoid(raw)
    ux, uy, uh, uw = (_column(u, k, 4) for k in range(4))
    if deformable:
        hp = _affine(uh, H - p_min, p_min)
        wp = _affine(uw, W - p_min, p_min)
        # xc = wp/2 + ux * (W - wp)
        xc = scale(wp, 0.5) + (scale(ux, W) - multiply(ux, wp))
        yc = scale(hp, 0.5) + (scale(uy, H) - multiply(uy, hp))
    else:
        graph = raw.graph
        n = raw.shape[0]
        hp = graph.constant(np.full((n, 1), float(P)))
        wp = graph.constant(np.full((n, 1), float(P)))
        xc = _affine(ux, W - P, P / 2.0)
        yc = _affine(uy, H - P, P / 2.0)
    return xc, yc, hp, wp


def map_policy_to_patchspec(raw, H: int, W: int, P: int, p_min: Optional[float] = None,
                            deformable: bool = True) -> PatchSpec:
    p_min = P / 2.0 if p_min is None else p_min
    graph = Graph()
    raw_t = graph.constant(np.asarray(raw, dtype=np.float64).reshape(1, 4))
    fields = policy_to_patch_tensors(raw_t, H, W, P, p_min, deformable)
    return PatchSpec.from_array([f.data[0, 0] for f in fields])


def specs_to_array(xc: Tensor, yc: Tensor, hp: Tensor, wp: Tensor) -> np.ndarray:
    return np.concatenate([xc.data, yc.data, hp.data, wp.data], axis=1)


# feature-space crop and spatial policy losses -----------------------------------

@dataclass
class PatchEngineStats:
    feature_clamps: int = 0


stats = PatchEngineStats()


def feature_grid_size(P: int, feature_size: int, frame_size: int) -> int:
    size = int(np.floor(P * feature_size / frame_size + 0.5))
    if size < 1:
        stats.feature_clamps += 1
        logger.warning(f"Feature patch for P={P} on {feature_size}/{frame_size} grid clamped to 1 cell")
        return 1
    return size


def feature_patch_crop(eG: Tensor, xc: Tensor, yc: Tensor, hp: Tensor, wp: Tensor,
                       H: int, W: int, P: int) -> Tensor:
    """Crop the patch region out of a (N, C', H^G, W^G) feature map"""
    if eG.data.ndim != 4:
        raise ShapeError('feature-patch-crop', eG.shape)
    hg, wg = eG.shape[2], eG.shape[3]
    if hg < 2 or wg < 2:
        raise ValidationError(f"Feature map {hg}x{wg} too small for patch cropping")
    sy, sx = hg / H, wg / W
    out_h = feature_grid_size(P, hg, H)
    out_w = feature_grid_size(P, wg, W)
    return crop_patches(eG, scale(xc, sx), scale(yc, sy), scale(hp, sy), scale(wp, sx), out_h, out_w)


def spatial_policy_loss(pooled: Tensor, labels, aux_w: Tensor, aux_b: Tensor) -> Tensor:
    """Cross-entropy of the auxiliary head on pooled feature patches"""
    return cross_entropy(linear(pooled, aux_w, aux_b), labels)


def size_penalty(hp: Tensor, wp: Tensor, H: int, W: int, units: str = 'pixels') -> Tensor:
    if units == 'pixels':
        dh = subtract(hp.graph.constant(np.full(hp.shape, float(H))), hp)
        dw = subtract(wp.graph.constant(np.full(wp.shape, float(W))), wp)
    else:
        dh = 1.0 - scale(hp, 1.0 / H)
        dw = 1.0 - scale(wp, 1.0 / W)
    return mean(add(multiply(dh, dh), multiply(dw, dw)))


def deformable_spatial_loss(ce: Tensor, hp: Tensor, wp: Tensor, H: int, W: int, alpha: float,
                            units: str = 'pixels') -> Tensor:
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return ce
    return ce + scale(size_penalty(hp, wp, H, W, units), alpha)


# baseline crop policies ----------------------------------------------------

def center_specs(n: int, H: int, W: int, P: int) -> np.ndarray:
    return np.tile([W / 2.0, H / 2.0, float(P), float(P)], (n, 1))


def random_specs(rng: np.random.Generator, n: int, H: int, W: int, P: int, p_min: float,
                 deformable: bool = False) -> np.ndarray:
    """Uniform over valid centres; in deformable mode size is uniform over [p_min, min(H, W)]"""
    if deformable:
        size = rng.uniform(p_min, min(H, W), size=(n, 2))
        hp, wp = size[:, 0], size[:, 1]
    else:
        hp = wp = np.full(n, float(P))
    xc = wp / 2 + rng.random(n) * (W - wp)
    yc = hp / 2 + rng.random(n) * (H - hp)
    return np.stack([xc, yc, hp, wp], axis=1)


def gaussian_specs(rng: np.random.Generator, n: int, H: int, W: int, P: int,
                   sigma: float = 0.25) -> np.ndarray:
    """Fixed-size crops scattered around the frame centre, sigma in frame units"""
    xc = np.clip(W / 2 + rng.normal(0, sigma * W, n), P / 2, W - P / 2)
    yc = np.clip(H / 2 + rng.normal(0, sigma * H, n), P / 2, H - P / 2)
    return np.stack([xc, yc, np.full(n, float(P)), np.full(n, float(P))], axis=1)


def pooled_feature_crop(eG: Tensor, specs: Tuple[Tensor, Tensor, Tensor, Tensor],
                        H: int, W: int, P: int) -> Tensor:
    return global_average_pool(feature_patch_crop(eG, *specs, H, W, P))
