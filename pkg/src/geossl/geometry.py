"""Projective and affine matrix algebra, image warping and parameter encodings.

All matrices are 3x3 float64 arrays acting on column vectors ``(x, y, 1)`` in
pixel coordinates, with ``x`` the column index and ``y`` the row index. Every
matrix returned from this module is stored in the gauge ``m[2, 2] == 1``.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

__all__ = [
    "AffineParams",
    "TransformParams",
    "GeometryError",
    "ParameterRangeError",
    "SingularMatrixError",
    "GaugeError",
    "PointAtInfinityError",
    "DegenerateConfigurationError",
    "DEFAULT_BOUNDS",
    "SHEAR_MAX_DEG",
    "PARAM_DIMS",
    "identity",
    "translation",
    "affine_matrix",
    "perspective_matrix",
    "compose",
    "invert",
    "apply_to_point",
    "warp_image",
    "normalize_params",
    "denormalize_params",
    "homography_param_vector",
    "homography_from_param_vector",
    "estimate_homography_dlt",
]


class GeometryError(ValueError):
    pass


class ParameterRangeError(GeometryError):
    def __init__(self, field: str, value: float, bounds: tuple[float, float]):
        self.field = field
        self.value = value
        self.bounds = bounds
        super().__init__(f"{field}={value!r} outside range [{bounds[0]}, {bounds[1]}]")


class SingularMatrixError(GeometryError):
    pass


class GaugeError(GeometryError):
    """Raised when a product matrix has ``m[2, 2] == 0`` and cannot be gauge-fixed."""


class PointAtInfinityError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


SHEAR_MAX_DEG = 25.0

# sampling box of the spatial transformation set
DEFAULT_BOUNDS: dict[str, tuple[float, float]] = {
    "rotation_deg": (-90.0, 90.0),
    "translate_x_frac": (0.0, 0.25),
    "translate_y_frac": (0.0, 0.25),
    "scale": (0.7, 1.3),
    "shear_x_deg": (-SHEAR_MAX_DEG, SHEAR_MAX_DEG),
    "shear_y_deg": (-SHEAR_MAX_DEG, SHEAR_MAX_DEG),
}

# regression target length per transform mode
PARAM_DIMS = {
    "affine": 6,
    "homography": 8,
    "rotation": 1,
    "translation": 2,
    "scale": 1,
    "shear": 2,
}

_EPS = 1e-12


@dataclass(frozen=True)
class AffineParams:
    """Raw affine parameters. Translations are fractions of the image size."""

    rotation_deg: float = 0.0
    translate_x_frac: float = 0.0
    translate_y_frac: float = 0.0
    scale: float = 1.0
    shear_x_deg: float = 0.0
    shear_y_deg: float = 0.0

    @classmethod
    def from_pixels(cls, width, height, tx_px=0.0, ty_px=0.0, **kwargs) -> "AffineParams":
        return cls(translate_x_frac=tx_px / width, translate_y_frac=ty_px / height, **kwargs)

    def check(self, bounds: dict[str, tuple[float, float]] | None = None) -> None:
        bounds = DEFAULT_BOUNDS if bounds is None else bounds
        for f in fields(self):
            value = getattr(self, f.name)
            lo, hi = bounds[f.name]
            if not np.isfinite(value) or value < lo or value > hi:
                raise ParameterRangeError(f.name, value, (lo, hi))

    def as_tuple(self) -> tuple[float, ...]:
        return astuple(self)


@dataclass(frozen=True)
class TransformParams:
    """Normalized regression target for one spatial transform."""

    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in PARAM_DIMS:
            raise ValueError(f"unknown transform mode {self.mode!r}")
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != PARAM_DIMS[self.mode]:
            raise ValueError(
                f"mode {self.mode!r} needs {PARAM_DIMS[self.mode]} values, got {values.shape[0]}"
            )
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]


def identity() -> np.ndarray:
    return np.eye(3)


def translation(tx: float, ty: float) -> np.ndarray:
    m = np.eye(3)
    m[0, 2] = tx
    m[1, 2] = ty
    return m


def _center(width, height):
    return (width - 1) / 2.0, (height - 1) / 2.0


def _gauge(m: np.ndarray) -> np.ndarray:
    if abs(m[2, 2]) < _EPS:
        raise GaugeError("m[2, 2] vanishes; matrix sends the origin to infinity")
    out = m / m[2, 2]
    out[2, 2] = 1.0
    return out


def affine_matrix(p: AffineParams, width: int, height: int, bounds=None) -> np.ndarray:
    """Matrix for ``p`` about the image center.

    Composition order, in the centered frame: shear, then scale, then rotation,
    then translation. ``bounds`` overrides the default sampling box used for
    the range check.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    p.check(bounds)
    cx, cy = _center(width, height)
    a = np.deg2rad(p.rotation_deg)
    shear = np.array(
        [
            [1.0, np.tan(np.deg2rad(p.shear_x_deg)), 0.0],
            [np.tan(np.deg2rad(p.shear_y_deg)), 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    scale = np.diag([p.scale, p.scale, 1.0])
    rot = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    shift = translation(p.translate_x_frac * width, p.translate_y_frac * height)
    m = translation(cx, cy) @ shift @ rot @ scale @ shear @ translation(-cx, -cy)
    m[2] = (0.0, 0.0, 1.0)
    return m


def _corners(width, height) -> np.ndarray:
    w, h = width - 1.0, height - 1.0
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    n = len(pts)
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1.0)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                d1 = pts[j] - pts[i]
                d2 = pts[k] - pts[i]
                if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol * scale * scale:
                    return True
    return False


def perspective_matrix(corner_shifts, width: int, height: int, factor: float = 1.0) -> np.ndarray:
    """Homography sending the four image corners to ``corners + corner_shifts``.

    Corners are ordered top-left, top-right, bottom-right, bottom-left. Each
    shift component must not exceed ``factor`` times half the image dimension
    along that axis. The 8x8 system is solved exactly.
    """
    shifts = np.asarray(corner_shifts, dtype=np.float64).reshape(4, 2)
    limit = factor * np.array([width / 2.0, height / 2.0])
    if np.any(np.abs(shifts) > limit + 1e-12):
        raise GeometryError(f"corner shift exceeds {factor} x half image size")
    src = _corners(width, height)
    dst = src + shifts
    if _has_collinear_triple(dst):
        raise DegenerateConfigurationError("shifted corners contain a collinear triple")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = (x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y)
        a[2 * i + 1] = (0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y)
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("corner correspondence system is singular") from exc
    return np.append(sol, 1.0).reshape(3, 3)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix for "apply ``b``, then ``a``"."""
    return _gauge(np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64))


def invert(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    det = np.linalg.det(h)
    if not np.isfinite(det) or abs(det) < _EPS:
        raise SingularMatrixError(f"matrix is singular (det={det:.3g})")
    return _gauge(np.linalg.inv(h))


def apply_to_point(h: np.ndarray, x, y):
    """Map pixel coordinates through ``h``; ``x`` and ``y`` may be arrays."""
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u = h[0, 0] * x + h[0, 1] * y + h[0, 2]
    v = h[1, 0] * x + h[1, 1] * y + h[1, 2]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if np.any(np.abs(w) < _EPS):
        raise PointAtInfinityError("point maps to infinity")
    px, py = u / w, v / w
    if px.ndim == 0:
        return float(px), float(py)
    return px, py


def warp_image(img, h, interp: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Warp ``img`` (HxW or HxWxC) by ``h`` using inverse mapping.

    Output pixel ``(x, y)`` samples the source at ``invert(h) @ (x, y, 1)``.
    Source pixels outside the image contribute ``fill``.
    """
    img = np.asarray(img)
    if img.size == 0:
        raise ValueError("empty image")
    squeeze = img.ndim == 2
    src = img[..., None] if squeeze else img
    height, width = src.shape[:2]
    hinv = invert(h)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    w = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    safe = np.abs(w) > _EPS
    w = np.where(safe, w, 1.0)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / w
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / w
    sx = np.where(safe, sx, -2.0)
    sy = np.where(safe, sy, -2.0)
    data = src.astype(np.float64, copy=False)
    fill_px = np.broadcast_to(np.asarray(fill, dtype=np.float64), (src.shape[2],))

    def gather(ix, iy):
        inside = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
        vals = data[np.clip(iy, 0, height - 1), np.clip(ix, 0, width - 1)]
        return np.where(inside[..., None], vals, fill_px)

    if interp == "nearest":
        out = gather(np.floor(sx + 0.5).astype(np.int64), np.floor(sy + 0.5).astype(np.int64))
    elif interp == "bilinear":
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        fx = (sx - x0)[..., None]
        fy = (sy - y0)[..., None]
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        top = gather(x0, y0) * (1.0 - fx) + gather(x0 + 1, y0) * fx
        bottom = gather(x0, y0 + 1) * (1.0 - fx) + gather(x0 + 1, y0 + 1) * fx
        out = top * (1.0 - fy) + bottom * fy
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    out = out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    return out[..., 0] if squeeze else out


def normalize_params(raw: AffineParams, width: int, height: int) -> TransformParams:
    """Pack raw affine parameters into the 6-dim regression target.

    Order: rotation, vertical translation, horizontal translation, scale,
    vertical shear, horizontal shear. Scale is left unnormalized.
    """
    tx_px = raw.translate_x_frac * width
    ty_px = raw.translate_y_frac * height
    values = [
        raw.rotation_deg / 360.0,
        ty_px / height,
        tx_px / width,
        raw.scale,
        raw.shear_y_deg / SHEAR_MAX_DEG,
        raw.shear_x_deg / SHEAR_MAX_DEG,
    ]
    return TransformParams("affine", np.array(values))


def denormalize_params(params: TransformParams, width: int, height: int) -> AffineParams:
    if params.mode != "affine":
        raise ValueError(f"expected affine params, got mode {params.mode!r}")
    rot, ty, tx, scale, shy, shx = params.values
    return AffineParams(
        rotation_deg=float(rot * 360.0),
        translate_x_frac=float(tx * width) / width,
        translate_y_frac=float(ty * height) / height,
        scale=float(scale),
        shear_x_deg=float(shx * SHEAR_MAX_DEG),
        shear_y_deg=float(shy * SHEAR_MAX_DEG),
    )


def homography_param_vector(h: np.ndarray, width: int, height: int) -> TransformParams:
    """The 8 free entries of ``h`` with translation and perspective terms scaled to O(1)."""
    h = np.asarray(h, dtype=np.float64)
    if h[2, 2] != 1.0:
        raise GaugeError("homography must satisfy m[2, 2] == 1")
    values = [
        h[0, 0], h[0, 1], h[0, 2] / width,
        h[1, 0], h[1, 1], h[1, 2] / height,
        h[2, 0] * width, h[2, 1] * height,
    ]
    return TransformParams("homography", np.array(values))


def homography_from_param_vector(params: TransformParams, width: int, height: int) -> np.ndarray:
    v = params.values
    if params.mode != "homography":
        raise ValueError(f"expected homography params, got mode {params.mode!r}")
    return np.array(
        [
            [v[0], v[1], v[2] * width],
            [v[3], v[4], v[5] * height],
            [v[6] / width, v[7] / height, 1.0],
        ]
    )


def _hartley(pts: np.ndarray):
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    if d < _EPS:
        raise DegenerateConfigurationError("points are coincident")
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, t


def estimate_homography_dlt(src, dst) -> np.ndarray:
    """Normalized Direct Linear Transform estimate of the homography ``src -> dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same number of points")
    if len(src) < 4:
        raise DegenerateConfigurationError(f"need at least 4 correspondences, got {len(src)}")
    if len(src) == 4 and _has_collinear_triple(src):
        raise DegenerateConfigurationError("three source points are collinear")
    sn, ts = _hartley(src)
    dn, td = _hartley(dst)
    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append((-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u))
        rows.append((0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v))
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    # null space must be one-dimensional
    if sv[7] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("correspondence matrix is rank deficient")
    hn = vt[-1].reshape(3, 3)
    return _gauge(np.linalg.inv(td) @ hn @ ts)
