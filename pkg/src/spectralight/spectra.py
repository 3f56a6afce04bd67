"""Hyperspectral processing chain.

Fiber permutation recovery by wavelength sorting, per-fibre spectrum
extraction (column averaging), linear wavelength calibration, white
reference normalization, absorbance, and the two-chromophore oxygen
saturation fit with r^2-based rejection.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "SPECTRALIGHT_DATA_DIR"
_DEFAULT_DATA_DIR = Path(__file__).parent / "data"

R_SQUARED_ACCEPT = 0.8


class SpectraError(ValueError):
    pass


@dataclass
class SpectralFrame:
    """Spectrograph sensor image: rows = spectral axis, columns = fibre bands."""

    sensor: np.ndarray  # (n_rows, n_cols)
    bands: dict  # fibre band index -> (col_start, col_stop) half-open

    def __post_init__(self):
        if len(self.bands) > 171:
            raise ValueError("at most 171 fibre bands")
        spans = sorted(self.bands.values())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError("fibre bands must be disjoint")

    def bands_to_json(self) -> str:
        return json.dumps({str(k): list(v) for k, v in self.bands.items()}, indent=2)

    @classmethod
    def bands_from_json(cls, text: str) -> dict:
        return {int(k): tuple(v) for k, v in json.loads(text).items()}


@dataclass(frozen=True)
class WavelengthCalibration:
    slope: float  # nm per pixel row
    intercept: float  # nm at row 0
    residual_nm: float = 0.0

    def __post_init__(self):
        if self.slope == 0:
            raise ValueError("calibration slope must be nonzero")

    def wavelengths(self, n_rows: int) -> np.ndarray:
        return self.intercept + self.slope * np.arange(n_rows)


@dataclass(frozen=True)
class FiberMap:
    """Distal spot index -> proximal sensor band index."""

    permutation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.permutation, dtype=int)
        if sorted(p.tolist()) != list(range(p.size)):
            raise ValueError("fiber map must be a bijection")
        object.__setattr__(self, "permutation", p)

    def band_of(self, spot_index: int) -> int:
        return int(self.permutation[spot_index])

    def inverse(self) -> "FiberMap":
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.permutation.size)
        return FiberMap(inv)


@dataclass
class Spectrum:
    wavelengths: np.ndarray  # strictly increasing, nm
    values: np.ndarray
    valid: np.ndarray | None = None  # bool mask; None means all valid

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.wavelengths.shape != self.values.shape:
            raise ValueError("wavelength and value arrays must match")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["wavelength_nm", "value"])
            for lam, v, ok in zip(self.wavelengths, self.values, self.valid):
                w.writerow([f"{lam:.17g}", f"{v:.17g}" if ok else "nan"])

    @classmethod
    def from_csv(cls, path):
        lams, vals = [], []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                lams.append(float(row["wavelength_nm"]))
                vals.append(float(row["value"]))
        vals = np.array(vals)
        return cls(np.array(lams), vals, valid=~np.isnan(vals))


def map_fibers(distal_wavelengths_nm, proximal_wavelengths_nm, tolerance_nm: float = 0.1) -> FiberMap:
    """Recover the incoherent-bundle permutation by rank-matching wavelengths."""
    distal = np.asarray(distal_wavelengths_nm, dtype=float)
    proximal = np.asarray(proximal_wavelengths_nm, dtype=float)
    if distal.size != proximal.size:
        raise ValueError("wavelength lists must have equal length")
    for arr in (distal, proximal):
        s = np.sort(arr)
        if np.any(np.diff(s) < tolerance_nm):
            raise SpectraError("ambiguous fiber mapping: duplicate wavelengths within tolerance")
    # Spot with the k-th smallest wavelength maps to the band with the
    # k-th smallest wavelength.
    distal_rank = np.argsort(np.argsort(distal))
    proximal_order = np.argsort(proximal)
    return FiberMap(proximal_order[distal_rank])


def extract_fiber_spectrum(frame: SpectralFrame, fiber_index: int) -> np.ndarray:
    """Per-row mean over the fibre's sensor columns (counts vs row)."""
    if fiber_index not in frame.bands:
        raise SpectraError(f"no band defined for fiber {fiber_index}")
    c0, c1 = frame.bands[fiber_index]
    if c1 <= c0:
        raise SpectraError(f"empty band for fiber {fiber_index}")
    return frame.sensor[:, c0:c1].mean(axis=1)


def calibrate_wavelength(lines) -> WavelengthCalibration:
    """OLS fit of wavelength against peak row for known laser lines."""
    lines = list(lines)
    if len(lines) < 2:
        raise SpectraError("need at least 2 calibration lines")
    wavelengths = np.array([l[0] for l in lines], dtype=float)
    rows = np.array([l[1] for l in lines], dtype=float)
    if np.ptp(rows) == 0:
        raise SpectraError("calibration lines have identical rows")
    A = np.stack([rows, np.ones_like(rows)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, wavelengths, rcond=None)
    resid = wavelengths - (slope * rows + intercept)
    return WavelengthCalibration(float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))))


def normalize_reflectance(raw: Spectrum, white_reference: Spectrum,
                          floor_fraction: float = 1e-6) -> Spectrum:
    """Pointwise raw / white, masking rows where the reference is near zero."""
    if raw.wavelengths.shape != white_reference.wavelengths.shape or np.any(
        raw.wavelengths != white_reference.wavelengths
    ):
        raise ValueError("raw and white reference must share a wavelength grid")
    floor = floor_fraction * float(np.max(white_reference.values))
    ok = white_reference.values > floor
    if not ok.any():
        raise SpectraError("white reference entirely below floor")
    vals = np.zeros_like(raw.values)
    vals[ok] = raw.values[ok] / white_reference.values[ok]
    return Spectrum(raw.wavelengths, vals, valid=ok & raw.valid & white_reference.valid)


def absorbance(reflectance: Spectrum) -> Spectrum:
    """A = -log10(R); nonpositive reflectance rows are masked."""
    ok = reflectance.valid & (reflectance.values > 0)
    vals = np.zeros_like(reflectance.values)
    vals[ok] = -np.log10(reflectance.values[ok])
    return Spectrum(reflectance.wavelengths, vals, valid=ok)


# ---------------------------------------------------------------------------
# Chromophore fitting


@dataclass
class ChromophoreBasis:
    """Extinction coefficients (per-molar per-cm) for HbO2 and Hb."""

    wavelengths: np.ndarray
    eps_hbo2: np.ndarray
    eps_hb: np.ndarray
    source: str = ""

    def resample(self, wavelengths: np.ndarray) -> "ChromophoreBasis":
        wavelengths = np.asarray(wavelengths, dtype=float)
        return ChromophoreBasis(
            wavelengths,
            np.interp(wavelengths, self.wavelengths, self.eps_hbo2),
            np.interp(wavelengths, self.wavelengths, self.eps_hb),
            self.source,
        )


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, _DEFAULT_DATA_DIR))


def load_hemoglobin_basis(path=None) -> ChromophoreBasis:
    """Load the bundled HbO2/Hb extinction table (CSV with '#' header lines)."""
    path = Path(path) if path else data_dir() / "hemoglobin_extinction.csv"
    source_lines = []
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                source_lines.append(line.lstrip("# "))
            elif not line.startswith("wavelength"):
                rows.append([float(x) for x in line.split(",")])
    arr = np.array(rows)
    return ChromophoreBasis(arr[:, 0], arr[:, 1], arr[:, 2], source=" ".join(source_lines))


@dataclass
class StO2Result:
    sto2: float
    c_hbo2: float
    c_hb: float
    baseline: tuple
    r_squared: float
    accepted: bool
    clamped: bool = False


def _design_matrix(wavelengths, basis: ChromophoreBasis):
    b = basis.resample(wavelengths)
    lam_scaled = (wavelengths - wavelengths.mean()) / 100.0
    return np.stack([b.eps_hbo2, b.eps_hb, np.ones_like(wavelengths), lam_scaled], axis=1)


def fit_sto2(absorbance_spectrum: Spectrum, basis: ChromophoreBasis,
             min_points: int = 10) -> StO2Result:
    """Linear Beer-Lambert fit: A ~ c1*eps_HbO2 + c2*eps_Hb + c3 + c4*lambda.

    Accepted iff r^2 >= 0.8. Negative chromophore coefficients are clamped
    to zero (flagged); StO2 = c1 / (c1 + c2).
    """
    ok = absorbance_spectrum.valid
    lam = absorbance_spectrum.wavelengths[ok]
    A = absorbance_spectrum.values[ok]
    lo = max(lam.min(initial=np.inf), basis.wavelengths.min())
    hi = min(lam.max(initial=-np.inf), basis.wavelengths.max())
    band = (lam >= lo) & (lam <= hi)
    lam, A = lam[band], A[band]
    if lam.size < min_points:
        raise SpectraError("too few unmasked wavelengths overlapping the basis")

    X = _design_matrix(lam, basis)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SpectraError("rank-deficient design matrix")
    coef, *_ = np.linalg.lstsq(X, A, rcond=None)
    fitted = X @ coef
    ss_res = float(((A - fitted) ** 2).sum())
    ss_tot = float(((A - A.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else -np.inf

    c1, c2 = float(coef[0]), float(coef[1])
    clamped = c1 < 0 or c2 < 0
    c1, c2 = max(c1, 0.0), max(c2, 0.0)
    sto2 = c1 / (c1 + c2) if (c1 + c2) > 0 else 0.0
    return StO2Result(
        sto2=sto2,
        c_hbo2=c1,
        c_hb=c2,
        baseline=(float(coef[2]), float(coef[3])),
        r_squared=r2,
        accepted=r2 >= R_SQUARED_ACCEPT,
        clamped=clamped,
    )


def synth_absorbance(wavelengths, basis: ChromophoreBasis, sto2: float,
                     total_concentration: float, baseline=(0.0, 0.0)) -> Spectrum:
    """Forward Beer-Lambert model, shared by tests and the simulator."""
    wavelengths = np.asarray(wavelengths, dtype=float)
    X = _design_matrix(wavelengths, basis)
    coef = np.array([
        sto2 * total_concentration,
        (1.0 - sto2) * total_concentration,
        baseline[0],
        baseline[1],
    ])
    return Spectrum(wavelengths, X @ coef)


# ---------------------------------------------------------------------------
# RGB recovery and spectral error


def default_ccd_sensitivity(wavelengths) -> np.ndarray:
    """(3, n) Gaussian R/G/B channel sensitivity curves."""
    wavelengths = np.asarray(wavelengths, dtype=float)
    centers = [610.0, 540.0, 465.0]
    sigmas = [35.0, 35.0, 30.0]
    return np.stack([np.exp(-((wavelengths - c) ** 2) / (2 * s**2)) for c, s in zip(centers, sigmas)])


def rgb_from_spectrum(reflectance: Spectrum, sensitivity: np.ndarray | None = None) -> np.ndarray:
    """Sensitivity-weighted trapezoidal mean of reflectance per channel."""
    lam = reflectance.wavelengths[reflectance.valid]
    vals = reflectance.values[reflectance.valid]
    if sensitivity is None:
        sens = default_ccd_sensitivity(lam)
    else:
        sens = np.asarray(sensitivity, dtype=float)
        if sens.shape[1] != reflectance.wavelengths.size:
            raise ValueError("sensitivity grid must match the spectrum grid")
        sens = sens[:, reflectance.valid]
    rgb = np.empty(3)
    for ch in range(3):
        norm = np.trapezoid(sens[ch], lam)
        rgb[ch] = np.trapezoid(vals * sens[ch], lam) / norm if norm > 0 else 0.0
    return rgb


def spectral_error(measured: Spectrum, gold: Spectrum, floor: float = 1e-6) -> float:
    """Mean relative error |measured - gold| / max(gold, floor), common grid."""
    lam = gold.wavelengths[gold.valid]
    g = gold.values[gold.valid]
    m = np.interp(lam, measured.wavelengths[measured.valid], measured.values[measured.valid])
    return float(np.mean(np.abs(m - g) / np.maximum(g, floor)))


# ---------------------------------------------------------------------------
# Frame-level pipeline


def reflectance_spectra(
    frame: SpectralFrame,
    white_frame: SpectralFrame,
    calib: WavelengthCalibration,
):
    """Per-band reflectance spectra: extract, divide by white, attach wavelengths."""
    wavelengths = calib.wavelengths(frame.sensor.shape[0])
    out = {}
    for band in frame.bands:
        raw = Spectrum(wavelengths, extract_fiber_spectrum(frame, band))
        white = Spectrum(wavelengths, extract_fiber_spectrum(white_frame, band))
        out[band] = normalize_reflectance(raw, white)
    return out


def sto2_report_csv(path, results: dict):
    """CSV rows: spot_id, sto2, r2, accepted. results maps id -> StO2Result."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["spot_id", "sto2", "r2", "accepted"])
        for spot_id in sorted(results):
            r = results[spot_id]
            w.writerow([spot_id, f"{r.sto2:.6f}", f"{r.r_squared:.6f}", int(r.accepted)])
