"""Procedural axial ultrasound sequences with aorta and catheter masks.

Each frame is a three-intensity anatomy (background tissue, bright vessel
wall, dark lumen) with a bright catheter disc inside the lumen, multiplied by
a smoothed log-normal speckle field with unit mean, and optionally an
acoustic shadow wedge cast below the upper vessel wall.

The aorta mask is the lumen ellipse; the wall is a ring just outside it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

TILT_ANGLES = (-60, -30, 0, 30, 60)


class SpecError(ValueError):
    """A sequence specification violates its geometric invariants."""

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


@dataclass(frozen=True)
class AortaPath:
    """Lumen ellipse moving linearly from ``center_start`` to ``center_end``.

    Semi-axes are in pixels before the tilt stretch; ``pulsation`` is the
    relative amplitude of a sinusoidal breathing of both semi-axes.
    """

    center_start: tuple = (32.0, 32.0)
    center_end: tuple = (32.0, 32.0)
    semi_axes: tuple = (12.0, 10.0)
    wall: float = 2.5
    pulsation: float = 0.03
    period: float = 8.0


@dataclass(frozen=True)
class CatheterPath:
    """Catheter offset from the lumen centre, in the ellipse's own frame."""

    offset_start: tuple = (0.0, 0.0)
    offset_end: tuple = (0.0, 0.0)
    radius: float = 2.5
    intensity: float = 0.95
    absent_frames: tuple = ()


@dataclass(frozen=True)
class SpeckleSpec:
    sigma: float = 0.3
    smoothing: float = 1.0


@dataclass(frozen=True)
class ShadowSpec:
    probability: float = 0.1
    width_deg: float = 20.0


@dataclass(frozen=True)
class Intensities:
    background: float = 0.35
    wall: float = 0.8
    lumen: float = 0.08


@dataclass(frozen=True)
class SequenceSpec:
    frames: int = 8
    image_size: int = 64
    aorta: AortaPath = field(default_factory=AortaPath)
    catheter: CatheterPath = field(default_factory=CatheterPath)
    speckle: SpeckleSpec = field(default_factory=SpeckleSpec)
    shadow: ShadowSpec = field(default_factory=ShadowSpec)
    intensities: Intensities = field(default_factory=Intensities)
    tilt_angle: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceSpec":
        def tup(x):
            return tuple(tup(v) for v in x) if isinstance(x, (list, tuple)) else x

        parts = {
            "aorta": AortaPath, "catheter": CatheterPath, "speckle": SpeckleSpec,
            "shadow": ShadowSpec, "intensities": Intensities,
        }
        kwargs = {}
        for key, val in d.items():
            if key in parts:
                kwargs[key] = parts[key](**{k: tup(v) for k, v in val.items()})
            else:
                kwargs[key] = val
        return cls(**kwargs)


@dataclass
class FrameSample:
    image: np.ndarray
    aorta_mask: np.ndarray
    catheter_mask: np.ndarray
    frame_index: int

    def mask(self, target: str) -> np.ndarray:
        if target == "aorta":
            return self.aorta_mask
        if target == "catheter":
            return self.catheter_mask
        raise ValueError(f"unknown target {target!r}")


@dataclass(frozen=True)
class FrameGeometry:
    center: tuple
    semi_axes: tuple
    wall: float
    angle_deg: float
    catheter_center: tuple | None
    catheter_radius: float


def tilt_stretch(tilt_deg: float) -> float:
    """Elongation of the vessel section under an oblique probe tilt."""
    return 1.0 / math.sqrt(math.cos(math.radians(tilt_deg)))


def _ellipse_value(dx, dy, a, b, angle_deg):
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2


def frame_geometry(spec: SequenceSpec, t: int) -> FrameGeometry:
    ao, ca = spec.aorta, spec.catheter
    u = t / (spec.frames - 1) if spec.frames > 1 else 0.0
    cx = ao.center_start[0] + (ao.center_end[0] - ao.center_start[0]) * u
    cy = ao.center_start[1] + (ao.center_end[1] - ao.center_start[1]) * u
    pulse = 1.0 + ao.pulsation * math.sin(2 * math.pi * t / ao.period)
    a = ao.semi_axes[0] * pulse * tilt_stretch(spec.tilt_angle)
    b = ao.semi_axes[1] * pulse
    angle = float(spec.tilt_angle)
    cath = None
    if t not in ca.absent_frames:
        ox = ca.offset_start[0] + (ca.offset_end[0] - ca.offset_start[0]) * u
        oy = ca.offset_start[1] + (ca.offset_end[1] - ca.offset_start[1]) * u
        th = math.radians(angle)
        cath = (cx + math.cos(th) * ox - math.sin(th) * oy, cy + math.sin(th) * ox + math.cos(th) * oy)
    return FrameGeometry((cx, cy), (a, b), ao.wall, angle, cath, ca.radius)


def validate_spec(spec: SequenceSpec) -> None:
    """Raise :class:`SpecError` if the spec breaks a geometric invariant."""
    if spec.tilt_angle not in TILT_ANGLES:
        raise SpecError(f"tilt angle {spec.tilt_angle} not in {TILT_ANGLES}")
    if spec.frames < 1 or spec.image_size < 8:
        raise SpecError("need at least one frame and an image of 8 px or more")
    if not 1.0 <= spec.catheter.radius <= 3.0:
        raise SpecError(f"catheter radius {spec.catheter.radius} outside [1, 3] px")
    if spec.speckle.sigma < 0 or spec.speckle.smoothing < 0:
        raise SpecError("speckle parameters must be non-negative")
    prev = None
    for t in range(spec.frames):
        g = frame_geometry(spec, t)
        if prev is not None and math.dist(prev, g.center) > 2.0 + 1e-9:
            raise SpecError(f"aorta centre moves {math.dist(prev, g.center):.2f} px (> 2)", t)
        prev = g.center
        if g.catheter_center is None:
            continue
        r = g.catheter_radius + 0.5
        px, py = g.catheter_center
        for phi in np.linspace(0, 2 * math.pi, 72, endpoint=False):
            dx = px + r * math.cos(phi) - g.center[0]
            dy = py + r * math.sin(phi) - g.center[1]
            if _ellipse_value(dx, dy, g.semi_axes[0], g.semi_axes[1], g.angle_deg) >= 1.0:
                raise SpecError("catheter leaves the aorta lumen", t)


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs.astype(np.float64), ys.astype(np.float64)


def rasterize_ellipse(size: int, center, semi_axes, angle_deg: float = 0.0) -> np.ndarray:
    """Binary mask of pixel centres inside the (rotated) ellipse."""
    xs, ys = _grid(size)
    val = _ellipse_value(xs - center[0], ys - center[1], semi_axes[0], semi_axes[1], angle_deg)
    return (val <= 1.0).astype(np.float32)


def rasterize_disc(size: int, center, radius: float) -> np.ndarray:
    xs, ys = _grid(size)
    return (((xs - center[0]) ** 2 + (ys - center[1]) ** 2) <= radius ** 2).astype(np.float32)


def speckle_field(rng: np.random.Generator, size: int, sigma: float, smoothing: float) -> np.ndarray:
    """Smoothed log-normal multiplicative field with unit mean."""
    if sigma == 0:
        return np.ones((size, size))
    noise = rng.standard_normal((size, size))
    if smoothing > 0:
        noise = ndimage.gaussian_filter(noise, smoothing, mode="wrap")
        noise /= noise.std()
    return np.exp(sigma * noise - 0.5 * sigma * sigma)


def shadow_wedge(size: int, apex, width_deg: float) -> np.ndarray:
    """Boolean region below ``apex`` within ``width_deg`` of the downward axis."""
    xs, ys = _grid(size)
    dx, dy = xs - apex[0], ys - apex[1]
    ang = np.degrees(np.arctan2(np.abs(dx), dy))
    return (dy > 0) & (ang <= width_deg / 2)


def render_frame(spec: SequenceSpec, t: int, rng: np.random.Generator) -> FrameSample:
    g = frame_geometry(spec, t)
    n = spec.image_size
    a, b = g.semi_axes
    lumen = rasterize_ellipse(n, g.center, (a, b), g.angle_deg)
    outer = rasterize_ellipse(n, g.center, (a + g.wall, b + g.wall), g.angle_deg)
    wall = (outer > 0) & (lumen == 0)
    ints = spec.intensities
    base = np.full((n, n), ints.background)
    base[wall] = ints.wall
    base[lumen > 0] = ints.lumen
    cath = np.zeros((n, n), dtype=np.float32)
    if g.catheter_center is not None:
        cath = rasterize_disc(n, g.catheter_center, g.catheter_radius)
        if np.any((cath > 0) & (lumen == 0)):
            raise SpecError("catheter pixels fall outside the lumen", t)
        base[cath > 0] = spec.catheter.intensity
    image = base * speckle_field(rng, n, spec.speckle.sigma, spec.speckle.smoothing)
    # both draws happen every frame so the random stream does not depend on the outcome
    shadow_on = rng.random() < spec.shadow.probability
    apex_shift = rng.uniform(-0.5, 0.5)
    if shadow_on:
        apex = (g.center[0] + apex_shift * a, g.center[1] - b - g.wall)
        wedge = shadow_wedge(n, apex, spec.shadow.width_deg)
        upper_wall = wall & (_grid(n)[1] < g.center[1])
        image[wedge & ~upper_wall] = 0.0
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return FrameSample(image, lumen, cath, t)


def generate_sequence(spec: SequenceSpec) -> list[FrameSample]:
    """Render every frame of ``spec``; a pure function of the spec (seed included)."""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    return [render_frame(spec, t, rng) for t in range(spec.frames)]


def random_spec(seed: int, frames: int = 8, image_size: int = 64, **overrides) -> SequenceSpec:
    """Draw a valid random spec; ``overrides`` replace top-level fields."""
    rng = np.random.default_rng(seed)
    s = image_size / 64.0
    for _ in range(100):
        tilt = int(rng.choice(TILT_ANGLES))
        a = rng.uniform(10.0, 13.0) * s
        b = rng.uniform(8.0, 10.0) * s
        wall = rng.uniform(2.0, 3.0) * s
        reach = a * tilt_stretch(tilt) * 1.05 + wall + 2
        lo, hi = reach, image_size - reach
        start = rng.uniform(lo, hi, size=2)
        step = rng.uniform(0.0, 1.5)
        heading = rng.uniform(0, 2 * math.pi)
        end = start + (frames - 1) * step * np.array([math.cos(heading), math.sin(heading)])
        end = np.clip(end, lo, hi)
        radius = float(rng.uniform(2.0, 3.0))
        room_a, room_b = 0.5 * (a - radius - 1.5), 0.5 * (b - radius - 1.5)
        off0 = rng.uniform(-1, 1, size=2) * (room_a, room_b)
        off1 = rng.uniform(-1, 1, size=2) * (room_a, room_b)
        spec = SequenceSpec(
            frames=frames,
            image_size=image_size,
            aorta=AortaPath(tuple(map(float, start)), tuple(map(float, end)), (float(a), float(b)),
                            float(wall), 0.03, float(rng.uniform(6, 12))),
            catheter=CatheterPath(tuple(map(float, off0)), tuple(map(float, off1)), radius,
                                  float(rng.uniform(0.85, 1.0))),
            tilt_angle=tilt,
            seed=int(rng.integers(0, 2**63 - 1)),
        )
        spec = replace(spec, **overrides)
        try:
            validate_spec(spec)
        except SpecError:
            continue
        return spec
    raise SpecError("could not draw a valid spec in 100 attempts")


# ---------------------------------------------------------------------------
# augmentation


def augment(frame: FrameSample, rotation: float = 0.0, gain: float = 1.0, shadow=None,
            *, allow_any_rotation: bool = False) -> FrameSample:
    """Rotate image and masks together, scale brightness, optionally cast a shadow.

    ``shadow`` is ``(apex_x, apex_y, width_deg)``.  Masks are re-binarised at
    0.5 after interpolation and are never affected by gain or shadow.
    """
    if not allow_any_rotation and not -30.0 <= rotation <= 30.0:
        raise ValueError(f"rotation {rotation} outside [-30, 30] degrees")
    if not 0.7 <= gain <= 1.3:
        raise ValueError(f"gain {gain} outside [0.7, 1.3]")
    image, aorta, cath = frame.image, frame.aorta_mask, frame.catheter_mask
    if rotation != 0.0:
        def rot(x, mode):
            return ndimage.rotate(x.astype(np.float64), rotation, reshape=False, order=1, mode=mode)

        image = rot(image, "nearest")
        aorta = (rot(aorta, "constant") >= 0.5).astype(np.float32)
        cath = (rot(cath, "constant") >= 0.5).astype(np.float32)
    image = image * gain
    if shadow is not None:
        image = np.where(shadow_wedge(image.shape[0], shadow[:2], shadow[2]), 0.0, image)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return FrameSample(image, aorta.copy(), cath.copy(), frame.frame_index)


def random_augment_params(rng: np.random.Generator, image_size: int, shadow_probability: float = 0.2) -> dict:
    params = {"rotation": float(rng.uniform(-30, 30)), "gain": float(rng.uniform(0.7, 1.3))}
    if rng.random() < shadow_probability:
        params["shadow"] = (float(rng.uniform(0, image_size)), float(rng.uniform(0, image_size / 2)),
                            float(rng.uniform(10, 30)))
    return params
