"""Contrastive (B1) and spatial (B2) augmentations and view-triple production.

B1 augmentations are sampled into a replayable :class:`AugmentationSpec`
before being applied, so the same spec always produces the same image. B2
samples a projective matrix together with its normalized regression target.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo

B1_MEMBERS = ("random crop", "horizontal flip", "colour jitter", "grayscale", "gaussian blur")
B2_MODE_MEMBERS = {
    "affine": ("rotation", "translation", "scale", "shear"),
    "homography": ("rotation", "translation", "scale", "shear", "perspective"),
    "rotation": ("rotation",),
    "translation": ("translation",),
    "scale": ("scale",),
    "shear": ("shear",),
}
# transforms that would break the x1 -> x1' homography relation
_HOMOGRAPHY_BREAKING = {"random crop"}

_ALIASES = {
    "crop": "random crop",
    "random crop": "random crop",
    "random resized crop": "random crop",
    "flip": "horizontal flip",
    "horizontal flip": "horizontal flip",
    "random horizontal flip": "horizontal flip",
    "color jitter": "colour jitter",
    "colour jitter": "colour jitter",
    "jitter": "colour jitter",
    "grayscale": "grayscale",
    "greyscale": "grayscale",
    "random grayscale": "grayscale",
    "blur": "gaussian blur",
    "gaussian blur": "gaussian blur",
}


def canonical_name(name: str) -> str:
    key = name.strip().lower().replace("_", " ").replace("-", " ")
    return _ALIASES.get(key, key)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class B1Config:
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    jitter_prob: float = 0.8
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    crop_prob: float = 1.0
    flip_prob: float = 0.5
    grayscale_prob: float = 0.2
    blur_kernel: int = 3
    blur_variance: tuple[float, float] = (0.1, 2.0)
    blur_prob: float = 1.0
    output_size: int = 32
    order: tuple[str, ...] = ("random crop", "horizontal flip", "colour jitter", "grayscale", "gaussian blur")

    def __post_init__(self):
        for name in ("jitter_prob", "crop_prob", "flip_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name}={p} is not a probability")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError(f"crop_scale {self.crop_scale} must lie in (0, 1]")
        if self.blur_kernel % 2 != 1:
            raise ConfigurationError("blur_kernel must be odd")
        object.__setattr__(self, "order", tuple(canonical_name(n) for n in self.order))
        unknown = set(self.order) - set(B1_MEMBERS)
        if unknown:
            raise ConfigurationError(f"unknown B1 transforms {sorted(unknown)}")

    @property
    def members(self) -> tuple[str, ...]:
        return self.order


@dataclass(frozen=True)
class B2Config:
    mode: str = "affine"
    rotation: tuple[float, float] = (-90.0, 90.0)
    translation: tuple[float, float] = (0.0, 0.25)
    scale: tuple[float, float] = (0.7, 1.3)
    shear: tuple[float, float] = (-25.0, 25.0)
    perspective: float = 0.5
    extra: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in B2_MODE_MEMBERS:
            raise ConfigurationError(f"unknown B2 mode {self.mode!r}")
        for name in ("rotation", "translation", "scale", "shear"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} range {lo, hi} is inverted")
        if not 0.0 <= self.perspective <= 1.0:
            raise ConfigurationError("perspective factor must lie in [0, 1]")
        object.__setattr__(self, "extra", tuple(canonical_name(n) for n in self.extra))

    @property
    def members(self) -> tuple[str, ...]:
        return B2_MODE_MEMBERS[self.mode] + self.extra

    @property
    def dim(self) -> int:
        return geo.PARAM_DIMS[self.mode]

    def bounds(self) -> dict[str, tuple[float, float]]:
        return {
            "rotation_deg": self.rotation,
            "translate_x_frac": self.translation,
            "translate_y_frac": self.translation,
            "scale": self.scale,
            "shear_x_deg": self.shear,
            "shear_y_deg": self.shear,
        }


def validate_disjointness(b1: B1Config, b2: B2Config | None) -> list[str]:
    """Return the B2 members that clash with B1 or break the homography relation."""
    if b2 is None:
        return []
    b1_set = {canonical_name(n) for n in b1.members}
    violations = []
    for name in b2.members:
        name = canonical_name(name)
        if (name in b1_set or name in _HOMOGRAPHY_BREAKING) and name not in violations:
            violations.append(name)
    return violations


def check_disjoint(b1: B1Config, b2: B2Config | None) -> None:
    violations = validate_disjointness(b1, b2)
    if violations:
        raise ConfigurationError(f"B1 and B2 must be disjoint; offending transforms: {violations}")


@dataclass
class AugStep:
    name: str
    fired: bool
    params: dict = field(default_factory=dict)


@dataclass
class AugmentationSpec:
    """Fully materialized, ordered B1 augmentation."""

    steps: list[AugStep]
    output_size: int = 32

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "AugmentationSpec":
        raw = json.loads(text)
        return cls(steps=[AugStep(**s) for s in raw["steps"]], output_size=raw["output_size"])

    def fired(self, name: str) -> bool:
        return any(s.fired for s in self.steps if s.name == name)


def _sample_crop_box(rng, scale, ratio):
    """Relative crop box (top, left, height, width) with random-resized-crop semantics."""
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        area = rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = math.sqrt(area * aspect)
        h = math.sqrt(area / aspect)
        if 0.0 < w <= 1.0 and 0.0 < h <= 1.0:
            top = rng.uniform(0.0, 1.0 - h)
            left = rng.uniform(0.0, 1.0 - w)
            return top, left, h, w
    # fallback: central crop clamped to the ratio range
    if 1.0 < ratio[0]:
        w, h = 1.0, 1.0 / ratio[0]
    elif 1.0 > ratio[1]:
        w, h = ratio[1], 1.0
    else:
        w, h = 1.0, 1.0
    return (1.0 - h) / 2.0, (1.0 - w) / 2.0, h, w


def sample_b1(rng: np.random.Generator, cfg: B1Config) -> AugmentationSpec:
    steps = []
    for name in cfg.order:
        if name == "random crop":
            fired = rng.random() < cfg.crop_prob
            top, left, h, w = _sample_crop_box(rng, cfg.crop_scale, cfg.crop_ratio) if fired else (0.0, 0.0, 1.0, 1.0)
            steps.append(AugStep(name, bool(fired), {"top": top, "left": left, "height": h, "width": w}))
        elif name == "horizontal flip":
            steps.append(AugStep(name, bool(rng.random() < cfg.flip_prob)))
        elif name == "colour jitter":
            fired = bool(rng.random() < cfg.jitter_prob)
            params = {}
            if fired:
                params = {
                    "order": [int(i) for i in rng.permutation(4)],
                    "brightness": rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness),
                    "contrast": rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast),
                    "saturation": rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation),
                    "hue": rng.uniform(-cfg.hue, cfg.hue),
                }
            steps.append(AugStep(name, fired, params))
        elif name == "grayscale":
            steps.append(AugStep(name, bool(rng.random() < cfg.grayscale_prob)))
        elif name == "gaussian blur":
            fired = bool(rng.random() < cfg.blur_prob)
            params = {"kernel": cfg.blur_kernel}
            if fired:
                params["variance"] = rng.uniform(*cfg.blur_variance)
            steps.append(AugStep(name, fired, params))
    return AugmentationSpec(steps, cfg.output_size)


# --- B1 primitives (images are HxWx3 float arrays in [0, 1]) ---

def resized_crop(img, top, left, height, width, size):
    """Bilinear resample of a relative crop box to ``size x size`` (half-pixel centers)."""
    src_h, src_w = img.shape[:2]
    y0, x0 = top * src_h, left * src_w
    ys = y0 + (np.arange(size) + 0.5) * (height * src_h / size) - 0.5
    xs = x0 + (np.arange(size) + 0.5) * (width * src_w / size) - 0.5
    ys = np.clip(ys, 0.0, src_h - 1.0)
    xs = np.clip(xs, 0.0, src_w - 1.0)
    yi = np.minimum(np.floor(ys).astype(np.int64), src_h - 2) if src_h > 1 else np.zeros(size, np.int64)
    xi = np.minimum(np.floor(xs).astype(np.int64), src_w - 2) if src_w > 1 else np.zeros(size, np.int64)
    fy = (ys - yi)[:, None, None]
    fx = (xs - xi)[None, :, None]
    y1 = np.minimum(yi + 1, src_h - 1)
    x1 = np.minimum(xi + 1, src_w - 1)
    top_row = img[yi][:, xi] * (1 - fx) + img[yi][:, x1] * fx
    bottom_row = img[y1][:, xi] * (1 - fx) + img[y1][:, x1] * fx
    return top_row * (1 - fy) + bottom_row * fy


def to_grayscale(img):
    lum = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return np.repeat(lum[..., None], 3, axis=-1)


def _blend(a, b, ratio):
    return np.clip(ratio * a + (1.0 - ratio) * b, 0.0, 1.0)


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    mean = to_grayscale(img)[..., 0].mean()
    return _blend(img, mean, factor)


def adjust_saturation(img, factor):
    return _blend(img, to_grayscale(img), factor)


def rgb_to_hsv(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def adjust_hue(img, shift):
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv)


def gaussian_kernel1d(kernel: int, variance: float) -> np.ndarray:
    half = kernel // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * variance))
    return k / k.sum()


def gaussian_blur(img, kernel: int, variance: float):
    k = gaussian_kernel1d(kernel, variance)
    half = kernel // 2
    pad = np.pad(img, ((half, half), (half, half), (0, 0)), mode="reflect")
    h, w = img.shape[:2]
    rows = sum(k[i] * pad[i : i + h] for i in range(kernel))
    return sum(k[i] * rows[:, i : i + w] for i in range(kernel))


_JITTER_OPS = (
    ("brightness", adjust_brightness),
    ("contrast", adjust_contrast),
    ("saturation", adjust_saturation),
    ("hue", adjust_hue),
)


def apply_b1(img, spec: AugmentationSpec) -> np.ndarray:
    """Apply ``spec`` to an HxWx3 image in [0, 1]; returns float32 at the spec's output size."""
    out = np.asarray(img, dtype=np.float64)
    resized = False
    for step in spec.steps:
        if step.name == "random crop":
            p = step.params
            out = resized_crop(out, p["top"], p["left"], p["height"], p["width"], spec.output_size)
            resized = True
        elif not step.fired:
            continue
        elif step.name == "horizontal flip":
            out = out[:, ::-1]
        elif step.name == "colour jitter":
            for idx in step.params["order"]:
                key, op = _JITTER_OPS[idx]
                out = op(out, step.params[key])
        elif step.name == "grayscale":
            out = to_grayscale(out)
        elif step.name == "gaussian blur":
            out = gaussian_blur(out, step.params["kernel"], step.params["variance"])
    if not resized and out.shape[:2] != (spec.output_size, spec.output_size):
        out = resized_crop(out, 0.0, 0.0, 1.0, 1.0, spec.output_size)
    return np.ascontiguousarray(out, dtype=np.float32)


# --- B2 sampling ---

def sample_b2(rng: np.random.Generator, cfg: B2Config, width: int, height: int):
    """Sample a spatial transform; returns ``(matrix, TransformParams)``.

    Parameters outside ``cfg.mode`` stay at identity. The matrix is rebuilt
    from the stored normalized target, so regenerating it from the target
    reproduces it exactly.
    """
    components = set(B2_MODE_MEMBERS[cfg.mode])

    def draw(name, rng_range, default):
        return float(rng.uniform(*rng_range)) if name in components else default

    rot = draw("rotation", cfg.rotation, 0.0)
    ty = draw("translation", cfg.translation, 0.0)
    tx = draw("translation", cfg.translation, 0.0)
    scale = draw("scale", cfg.scale, 1.0)
    shy = draw("shear", cfg.shear, 0.0)
    shx = draw("shear", cfg.shear, 0.0)
    raw = geo.AffineParams(rot, tx, ty, scale, shx, shy)
    full = geo.normalize_params(raw, width, height)
    raw = geo.denormalize_params(full, width, height)
    bounds = _widen(cfg.bounds(), raw)
    affine = geo.affine_matrix(raw, width, height, bounds=bounds)

    if cfg.mode == "homography":
        inward = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
        half = np.array([width / 2.0, height / 2.0])
        shifts = inward * rng.uniform(0.0, cfg.perspective, size=(4, 2)) * half
        persp = geo.perspective_matrix(shifts, width, height, factor=max(cfg.perspective, 1e-12))
        target = geo.homography_param_vector(geo.compose(persp, affine), width, height)
        return geo.homography_from_param_vector(target, width, height), target

    v = full.values
    picks = {
        "affine": v,
        "rotation": v[[0]],
        "translation": v[[1, 2]],
        "scale": v[[3]],
        "shear": v[[4, 5]],
    }
    return affine, geo.TransformParams(cfg.mode, picks[cfg.mode].copy())


def _widen(bounds, raw):
    # normalize/denormalize round trip may move a value one ulp past its bound
    out = {}
    for key, (lo, hi) in bounds.items():
        val = getattr(raw, key)
        out[key] = (min(lo, val), max(hi, val)) if abs(val - np.clip(val, lo, hi)) < 1e-9 else (lo, hi)
    return out


def matrix_from_params(params: geo.TransformParams, width: int, height: int) -> np.ndarray:
    """Rebuild the warp matrix from a normalized target (identity for unsampled components)."""
    if params.mode == "homography":
        return geo.homography_from_param_vector(params, width, height)
    full = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    slots = {"affine": slice(0, 6), "rotation": [0], "translation": [1, 2], "scale": [3], "shear": [4, 5]}
    full[slots[params.mode]] = params.values
    raw = geo.denormalize_params(geo.TransformParams("affine", full), width, height)
    return geo.affine_matrix(raw, width, height, bounds=_unbounded())


def _unbounded():
    inf = (-np.inf, np.inf)
    return {k: inf for k in geo.DEFAULT_BOUNDS}


@dataclass
class ViewTriple:
    x1: np.ndarray
    x2: np.ndarray
    x1_prime: np.ndarray
    phi: geo.TransformParams
    matrix: np.ndarray
    x2_prime: np.ndarray | None = None
    phi2: geo.TransformParams | None = None
    matrix2: np.ndarray | None = None


def make_view_triple(
    x,
    rng: np.random.Generator,
    b1: B1Config,
    b2: B2Config,
    interp: str = "bilinear",
    b2_rng: np.random.Generator | None = None,
    second: bool = False,
) -> ViewTriple:
    """Two B1 views of ``x`` plus a B2-warped copy of the first view.

    ``b2_rng`` lets callers keep the spatial sampling on its own stream;
    ``second`` also warps ``x2`` for the two-module variant.
    """
    check_disjoint(b1, b2)
    b2_rng = rng if b2_rng is None else b2_rng
    x1 = apply_b1(x, sample_b1(rng, b1))
    x2 = apply_b1(x, sample_b1(rng, b1))
    h, w = x1.shape[:2]
    m, phi = sample_b2(b2_rng, b2, w, h)
    triple = ViewTriple(x1, x2, geo.warp_image(x1, m, interp=interp), phi, m)
    if second:
        m2, phi2 = sample_b2(b2_rng, b2, w, h)
        triple.x2_prime = geo.warp_image(x2, m2, interp=interp)
        triple.phi2 = phi2
        triple.matrix2 = m2
    return triple


class TripleSampler:
    """Seeded producer of view triples; refuses non-disjoint B1/B2 pairs."""

    def __init__(self, b1: B1Config, b2: B2Config, interp: str = "bilinear", second: bool = False):
        check_disjoint(b1, b2)
        self.b1 = b1
        self.b2 = b2
        self.interp = interp
        self.second = second

    def __call__(self, x, rng, b2_rng=None) -> ViewTriple:
        return make_view_triple(x, rng, self.b1, self.b2, self.interp, b2_rng, self.second)
