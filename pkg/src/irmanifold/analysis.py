"""Agreement statistics, motion-signal agreement and six-sector myocardial wall areas.

Ellipses are ``(center, axes)`` with ``center = (x, y)`` in pixel
coordinates (``x`` along columns, ``y`` along rows, rows growing downward)
and ``axes = (a_x, a_y)`` semi-axes in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motion import LatentSignals, align_sign_and_scale
from .phantom import CardiacPhantomSpec, _inside_ellipse, _subsample_grid


@dataclass(frozen=True)
class AgreementReport:
    r_squared: float
    icc_a1: float
    estimate: np.ndarray
    reference: np.ndarray
    labels: tuple = ()

    def rows(self):
        labels = self.labels or tuple(str(i) for i in range(len(self.estimate)))
        return [(lab, float(e), float(r)) for lab, e, r in zip(labels, self.estimate, self.reference)]


@dataclass(frozen=True)
class SectorReport:
    areas_cm2: dict  # phase name -> (n_sectors,) array
    ring_area_cm2: dict
    pixel_mm: float
    border_fraction: float
    ellipses: dict = field(default_factory=dict)


def _pairs(est, ref):
    e = np.asarray(est, dtype=np.float64).ravel()
    r = np.asarray(ref, dtype=np.float64).ravel()
    if e.shape != r.shape:
        raise ValueError("estimate and reference lengths differ")
    if e.size < 3:
        raise ValueError("need at least 3 pairs")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(r))):
        raise ValueError("non-finite values in the pairs")
    return e, r


def r_squared(est, ref) -> float:
    """Squared Pearson correlation."""
    e, r = _pairs(est, ref)
    if e.std() == 0 or r.std() == 0:
        raise ValueError("zero variance")
    return float(np.corrcoef(e, r)[0, 1] ** 2)


def icc_a1_matrix(ratings) -> float:
    """ICC(A,1) of an ``(n targets, k raters)`` matrix.

    Two-way model, absolute agreement, single measurement, from the
    mean-square decomposition of the ratings table.
    """
    y = np.asarray(ratings, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 3 or y.shape[1] < 2:
        raise ValueError("need an (n >= 3, k >= 2) ratings matrix")
    n, k = y.shape
    grand = y.mean()
    row_means, col_means = y.mean(axis=1), y.mean(axis=0)
    msr = k * np.sum((row_means - grand) ** 2) / (n - 1)
    msc = n * np.sum((col_means - grand) ** 2) / (k - 1)
    resid = y - row_means[:, None] - col_means[None, :] + grand
    mse = np.sum(resid ** 2) / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k / n * (msc - mse)
    if not denom > 0:
        raise ValueError("degenerate variance")
    return float((msr - mse) / denom)


def icc_a1(est, ref) -> float:
    e, r = _pairs(est, ref)
    return icc_a1_matrix(np.column_stack([e, r]))


def agreement_report(est, ref, labels=()) -> AgreementReport:
    e, r = _pairs(est, ref)
    return AgreementReport(r_squared(e, r), icc_a1(e, r), e, r, tuple(labels))


def motion_agreement(latents: LatentSignals, cardiac_truth, resp_truth) -> dict:
    """|Pearson| of each latent channel against its truth after affine alignment."""
    return {"cardiac": align_sign_and_scale(latents.cardiac, cardiac_truth)[1],
            "resp": align_sign_and_scale(latents.resp, resp_truth)[1]}


# ---- sector geometry -------------------------------------------------------

def sector_angle(dx, dy):
    """Angle from 12 o'clock, counterclockwise on screen, in [0, 2 pi)."""
    return np.mod(np.arctan2(-dx, -dy), 2 * np.pi)


def _ray_exit(origin, ellipse, phi):
    """Distance from ``origin`` to the ellipse boundary along screen angle ``phi``."""
    (cx, cy), (ax, ay) = ellipse
    ux, uy = -np.sin(phi), -np.cos(phi)
    px, py = origin[0] - cx, origin[1] - cy
    a = (ux / ax) ** 2 + (uy / ay) ** 2
    b = 2 * (px * ux / ax ** 2 + py * uy / ay ** 2)
    c = (px / ax) ** 2 + (py / ay) ** 2 - 1
    disc = b * b - 4 * a * c
    return (-b + np.sqrt(np.maximum(disc, 0))) / (2 * a)


def _check_nested(endo, epi):
    (ecx, ecy), (eax, eay) = endo
    phi = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    pts_x = ecx + eax * np.cos(phi)
    pts_y = ecy + eay * np.sin(phi)
    (pcx, pcy), (pax, pay) = epi
    if min(eax, eay, pax, pay) <= 0:
        raise ValueError("ellipse axes must be positive")
    if np.any(((pts_x - pcx) / pax) ** 2 + ((pts_y - pcy) / pay) ** 2 >= 1):
        raise ValueError("endocardium must lie strictly inside the epicardium")


def ring_centroid(endo, epi):
    (ecx, ecy), (eax, eay) = endo
    (pcx, pcy), (pax, pay) = epi
    a_endo, a_epi = np.pi * eax * eay, np.pi * pax * pay
    return ((a_epi * pcx - a_endo * ecx) / (a_epi - a_endo), (a_epi * pcy - a_endo * ecy) / (a_epi - a_endo))


def ring_radii(endo, epi, phi, border_fraction: float, origin=None):
    """Inner and outer radii of the trimmed ring along screen angles ``phi``."""
    origin = ring_centroid(endo, epi) if origin is None else origin
    r_in = _ray_exit(origin, endo, phi)
    r_out = _ray_exit(origin, epi, phi)
    wall = r_out - r_in
    return r_in + border_fraction * wall, r_out - border_fraction * wall


def _sector_pixel_areas(endo, epi, n_sectors, border_fraction, supersample):
    _check_nested(endo, epi)
    if not 0 <= border_fraction < 0.5:
        raise ValueError("border fraction must lie in [0, 0.5)")
    origin = ring_centroid(endo, epi)
    (pcx, pcy), (pax, pay) = epi
    half = int(np.ceil(max(pax, pay) + abs(pcx - origin[0]) + abs(pcy - origin[1]))) + 2
    x, y = _subsample_grid(2 * half, supersample)
    x = x.ravel() + origin[0]
    y = y.ravel() + origin[1]
    dx, dy = x - origin[0], y - origin[1]
    phi = sector_angle(dx, dy)
    r = np.hypot(dx, dy)
    r_in, r_out = ring_radii(endo, epi, phi, border_fraction, origin)
    inside = (r >= r_in) & (r <= r_out)
    sector = np.minimum((phi / (2 * np.pi / n_sectors)).astype(int), n_sectors - 1)
    counts = np.bincount(sector[inside], minlength=n_sectors)
    return counts / supersample ** 2


def sector_areas_px(endo, epi, n_sectors: int = 6, border_fraction: float = 0.2,
                    supersample: int = 4) -> np.ndarray:
    """Sector areas in pixels squared by supersampled rasterization.

    The wall between ``endo`` and ``epi`` is trimmed by ``border_fraction`` of
    the local radial wall thickness at each boundary, then split into equal
    angular sectors about the ring centroid, sector 1 starting at 12 o'clock
    and proceeding counterclockwise.
    """
    return _sector_pixel_areas(endo, epi, n_sectors, border_fraction, supersample)


def sector_areas_quadrature(endo, epi, n_sectors: int = 6, border_fraction: float = 0.2,
                            n_points: int = 2000) -> np.ndarray:
    """Geometry oracle: ``1/2 * integral (R_out^2 - R_in^2) dphi`` per sector."""
    _check_nested(endo, epi)
    width = 2 * np.pi / n_sectors
    nodes, weights = np.polynomial.legendre.leggauss(n_points)
    out = np.empty(n_sectors)
    for s in range(n_sectors):
        phi = s * width + (nodes + 1) * width / 2
        r_in, r_out = ring_radii(endo, epi, phi, border_fraction)
        out[s] = 0.5 * np.sum(weights * (r_out ** 2 - r_in ** 2)) * width / 2
    return out


def sector_areas(ellipses: dict, n_sectors: int = 6, border_fraction: float = 0.2,
                 pixel_mm: float = 1.0, supersample: int = 4) -> SectorReport:
    """Sector report for ``{phase name: (endo, epi)}``, areas in cm^2."""
    if pixel_mm <= 0:
        raise ValueError("pixel spacing must be positive")
    to_cm2 = (pixel_mm / 10.0) ** 2
    areas, totals = {}, {}
    for name, (endo, epi) in ellipses.items():
        a = sector_areas_px(endo, epi, n_sectors, border_fraction, supersample) * to_cm2
        areas[name] = a
        totals[name] = float(a.sum())
    return SectorReport(areas, totals, float(pixel_mm), float(border_fraction), dict(ellipses))


# ---- phantom ROIs and blood-pool measurements -------------------------------

def phantom_ellipses(spec: CardiacPhantomSpec, cardiac_phase: float, resp_phase: float = 0.0):
    center, endo, epi = spec.ellipses(cardiac_phase, resp_phase)
    return (center, endo), (center, epi)


def roi_masks(spec: CardiacPhantomSpec, resp_phase: float = 0.0) -> dict:
    """Pure-tissue regions valid at every cardiac phase.

    ``myocardium``: between the diastolic endocardium grown by 1 px and the
    epicardium shrunk by 1 px. ``blood``: inside the systolic endocardium
    shrunk by 1 px. ``heart``: inside the epicardium shrunk by 1 px.
    """
    n = spec.grid
    y, x = np.meshgrid(np.arange(n) - n // 2, np.arange(n) - n // 2, indexing="ij")
    (cx, cy), endo_d, epi = spec.ellipses(-1.0, resp_phase)
    _, endo_s, _ = spec.ellipses(1.0, resp_phase)
    grow = lambda axes, d: (axes[0] + d, axes[1] + d)
    myo = (_inside_ellipse(x, y, cx, cy, *grow(epi, -1)) & ~_inside_ellipse(x, y, cx, cy, *grow(endo_d, 1)))
    blood = _inside_ellipse(x, y, cx, cy, *grow(endo_s, -1))
    heart = _inside_ellipse(x, y, cx, cy, *grow(epi, -1))
    if not (myo.any() and blood.any()):
        raise ValueError("phantom too small for pure-tissue regions")
    return {"myocardium": myo, "blood": blood, "heart": heart}


def roi_mean(frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean real part (phase-zero signal) inside ``mask`` for each frame."""
    f = np.asarray(frames)
    return f.real[..., mask].mean(axis=-1)


def blood_pool_area(frame: np.ndarray, masks: dict) -> float:
    """Blood-pool area in px^2 from per-pixel blood fractions inside the heart.

    Each heart pixel is treated as a blood/myocardium mixture with pure
    values taken from the two core regions.
    """
    v = np.asarray(frame).real
    b = v[masks["blood"]].mean()
    m = v[masks["myocardium"]].mean()
    if abs(b - m) < 1e-12:
        raise ValueError("blood and myocardium have the same signal; pick another contrast")
    frac = np.clip((v[masks["heart"]] - m) / (b - m), 0.0, 1.0)
    return float(frac.sum())


def endo_ellipse_from_area(spec: CardiacPhantomSpec, area_px: float, resp_phase: float = 0.0):
    """Endocardial ellipse with the nominal aspect ratio and the given area."""
    (center, _), _ = phantom_ellipses(spec, -1.0, resp_phase)
    ax, ay = spec.endo_axes
    s = np.sqrt(area_px / (np.pi * ax * ay))
    return center, (ax * s, ay * s)


def cardiac_extremes(frames: np.ndarray, masks: dict) -> tuple:
    """``(diastole index, systole index, areas)`` by largest and smallest blood pool."""
    areas = np.array([blood_pool_area(f, masks) for f in frames])
    return int(np.argmax(areas)), int(np.argmin(areas)), areas
