"""Frequency-domain NMR spectra: grids, loading, standardization and cropping."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_RTOL = 1e-6


class SpectrumError(ValueError):
    """Base class for problems with spectral input data."""


class MalformedInputError(SpectrumError):
    pass


class GridError(SpectrumError):
    pass


class DegenerateSpectrumError(SpectrumError):
    pass


class EmptyRegionError(SpectrumError):
    pass


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ChemicalShiftGrid:
    """Regular, ascending chemical shift axis in ppm.

    ``spectrometer_frequency`` is the operating frequency in MHz, used to
    convert Hz quantities (J-couplings, peak-widths) to ppm.
    """

    points: np.ndarray
    spectrometer_frequency: float = 600.0

    def __post_init__(self):
        pts = _readonly(self.points)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise GridError("grid needs at least two points")
        if not self.spectrometer_frequency > 0:
            raise GridError("spectrometer frequency must be positive")
        steps = np.diff(pts)
        if np.any(steps <= 0):
            raise GridError("grid points must be strictly increasing")
        dev = np.max(np.abs(steps - steps[0])) / steps[0]
        if dev > GRID_RTOL:
            raise GridError(
                f"irregular grid: relative spacing deviation {dev:.3g} exceeds {GRID_RTOL:g}"
            )

    @classmethod
    def regular(cls, lo: float, hi: float, n: int, spectrometer_frequency: float = 600.0):
        return cls(np.linspace(lo, hi, n), spectrometer_frequency)

    @property
    def n(self) -> int:
        return self.points.size

    @property
    def spacing(self) -> float:
        return float((self.points[-1] - self.points[0]) / (self.n - 1))

    def hz_to_ppm(self, hz):
        return np.asarray(hz, dtype=float) / self.spectrometer_frequency


@dataclass(frozen=True, eq=False)
class Spectrum:
    grid: ChemicalShiftGrid
    intensities: np.ndarray

    def __post_init__(self):
        y = _readonly(self.intensities)
        object.__setattr__(self, "intensities", y)
        if y.shape != self.grid.points.shape:
            raise SpectrumError(
                f"{y.size} intensities for a grid of {self.grid.n} points"
            )

    @property
    def x(self) -> np.ndarray:
        return self.grid.points

    @property
    def y(self) -> np.ndarray:
        return self.intensities

    @property
    def n(self) -> int:
        return self.grid.n

    def scaled(self, factor: float) -> "Spectrum":
        return Spectrum(self.grid, self.intensities * factor)


@dataclass(frozen=True, eq=False)
class SpectrumSet:
    """Replicate spectra that share metabolite concentrations."""

    spectra: tuple = field(default_factory=tuple)

    def __post_init__(self):
        specs = tuple(self.spectra)
        if not specs:
            raise SpectrumError("a spectrum set needs at least one spectrum")
        object.__setattr__(self, "spectra", specs)

    def __len__(self):
        return len(self.spectra)

    def __iter__(self):
        return iter(self.spectra)

    def __getitem__(self, i):
        return self.spectra[i]


_SPLIT = re.compile(r"[,\s]+")


def parse_spectrum_text(text: str, spectrometer_frequency: float = 600.0) -> Spectrum:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f for f in _SPLIT.split(line) if f]
        try:
            if len(fields) != 2:
                raise ValueError
            rows.append((float(fields[0]), float(fields[1])))
        except ValueError:
            # a single non-numeric line before any data is taken as a header
            if not rows and not any(_is_number(f) for f in fields):
                continue
            raise MalformedInputError(f"line {lineno}: cannot parse {raw!r}") from None
    if len(rows) < 2:
        raise MalformedInputError("spectrum file holds fewer than two data points")
    data = np.array(rows)
    order = np.argsort(data[:, 0], kind="stable")
    data = data[order]
    grid = ChemicalShiftGrid(data[:, 0], spectrometer_frequency)
    return Spectrum(grid, data[:, 1])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_spectrum(path, spectrometer_frequency: float = 600.0) -> Spectrum:
    """Read a two-column (ppm, intensity) text file.

    Comma or whitespace separated; lines starting with ``#`` and a single
    header line are skipped. Rows may come in either ppm order.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_spectrum_text(text, spectrometer_frequency)


def save_spectrum(spectrum: Spectrum, path, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.extend(f"{x:.10f},{y:.17g}" for x, y in zip(spectrum.x, spectrum.y))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def standardize(s: Spectrum) -> Spectrum:
    """Rescale intensities to sum to one. Negative values are kept."""
    total = float(np.sum(s.intensities))
    if total == 0.0 or not np.isfinite(total):
        raise DegenerateSpectrumError("cannot standardize a spectrum with zero total intensity")
    return Spectrum(s.grid, s.intensities / total)


def restrict(s: Spectrum, lo: float, hi: float) -> Spectrum:
    if not lo < hi:
        raise EmptyRegionError(f"region [{lo}, {hi}] is empty")
    keep = (s.x >= lo) & (s.x <= hi)
    if keep.sum() < 2:
        raise EmptyRegionError(f"region [{lo}, {hi}] holds fewer than two grid points")
    grid = ChemicalShiftGrid(s.x[keep], s.grid.spectrometer_frequency)
    return Spectrum(grid, s.intensities[keep])


def as_spectrum_set(obj) -> SpectrumSet:
    if isinstance(obj, SpectrumSet):
        return obj
    if isinstance(obj, Spectrum):
        return SpectrumSet((obj,))
    return SpectrumSet(tuple(obj))


__all__ = [
    "ChemicalShiftGrid",
    "Spectrum",
    "SpectrumSet",
    "SpectrumError",
    "MalformedInputError",
    "GridError",
    "DegenerateSpectrumError",
    "EmptyRegionError",
    "load_spectrum",
    "save_spectrum",
    "parse_spectrum_text",
    "standardize",
    "restrict",
    "as_spectrum_set",
]
