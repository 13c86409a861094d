"""Simulated spectra, a numerical-integration comparator, and scoring."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .spectrum import ChemicalShiftGrid, Spectrum, SpectrumError
from .templates import Multiplet, SignatureCatalog, build_template_matrix, load_bundled_catalog


class EstimationError(SpectrumError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    """Simulation protocol.

    ``noise_sd`` is in raw intensity units (templates have unit area per
    proton); ``hump_fraction`` is the hump's total area relative to the
    expected summed template area (mean concentration times total protons). ``jitter_sd`` > 0 gives every metabolite its own
    peak-width multiplier ``exp(N(0, jitter_sd^2))``.
    """

    catalog: str = "simulation12"
    lo: float = 0.0
    hi: float = 5.0
    n: int = 2000
    spectrometer_frequency: float = 600.0
    concentration_low: float = 0.0
    concentration_high: float = 1.0
    shift_halfwidth: float = 0.03
    gamma_hz: float = 2.5
    hump_sd: float = 5.8
    hump_fraction: float = 0.5
    noise_sd: float = 0.5
    jitter_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shift_halfwidth < 0 or self.noise_sd < 0 or self.jitter_sd < 0:
            raise ValueError("halfwidth, noise sd and jitter sd must be nonnegative")
        if not self.hi > self.lo or self.n < 2:
            raise ValueError("invalid grid")
        if self.concentration_high < self.concentration_low:
            raise ValueError("invalid concentration range")

    def load_catalog(self) -> SignatureCatalog:
        p = Path(self.catalog)
        if p.suffix == ".json" and p.exists():
            from .templates import load_catalog
            return load_catalog(p, self.spectrometer_frequency)
        return load_bundled_catalog(self.catalog, self.spectrometer_frequency)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        return cls(**d)


@dataclass
class GroundTruth:
    metabolites: list
    concentrations: np.ndarray
    shifts: np.ndarray
    gamma: float
    width_multipliers: np.ndarray
    hump_mean: float
    hump_sd: float
    hump_area: float
    noise_sd: float
    standardization_factor: float

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        d = dict(d)
        for k in ("concentrations", "shifts", "width_multipliers"):
            d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def simulate(config: SimulationConfig, catalog: SignatureCatalog | None = None,
             concentrations=None):
    """Draw one spectrum: templates at perturbed shifts, a broad Gaussian hump
    and white noise, then standardized to unit sum.

    Returns ``(Spectrum, GroundTruth)``; the truth is on the raw scale and
    records the standardization factor.
    """
    catalog = catalog or config.load_catalog()
    if len(catalog) == 0:
        raise ValueError("catalog is empty")
    rng = np.random.default_rng(config.seed)
    F = catalog.spectrometer_frequency
    grid = ChemicalShiftGrid.regular(config.lo, config.hi, config.n, F)
    M = len(catalog)
    if concentrations is None:
        beta = rng.uniform(config.concentration_low, config.concentration_high, M)
    else:
        beta = np.asarray(concentrations, dtype=float)
        rng.uniform(size=M)  # keep the stream aligned with the random case
    hw = config.shift_halfwidth
    shifts = catalog.shift_estimates + rng.uniform(-hw, hw, len(catalog.multiplets))
    gamma = config.gamma_hz / F
    mult = np.exp(rng.normal(0.0, config.jitter_sd, M)) if config.jitter_sd > 0 else np.ones(M)
    hump_mean = rng.uniform(config.lo, config.hi)
    cols = build_template_matrix(catalog, gamma, shifts, np.log(mult), grid).values
    y = cols @ beta
    protons = sum(t.total_protons for t in catalog.templates)
    hump_area = config.hump_fraction * 0.5 * (config.concentration_low + config.concentration_high) * protons
    x = grid.points
    hump = hump_area * np.exp(-0.5 * ((x - hump_mean) / config.hump_sd) ** 2) / (config.hump_sd * math.sqrt(2 * math.pi))
    y = y + hump + config.noise_sd * rng.standard_normal(config.n)
    factor = float(np.sum(y))
    if not factor > 0:
        raise ValueError("simulated spectrum has no positive mass to standardize")
    truth = GroundTruth(catalog.names, beta, shifts, gamma, mult, float(hump_mean), config.hump_sd,
                        hump_area, config.noise_sd, factor)
    return Spectrum(grid, y / factor), truth


# -- numerical integration ------------------------------------------------------


def central_interval(multiplet: Multiplet, shift: float, gamma: float, mass: float = 0.95):
    """Interval holding the central ``mass`` of the (unit-area) multiplet curve."""
    offs = shift + multiplet.offsets
    w = multiplet.weights

    def cdf(x):
        return float(np.sum(w * (0.5 + np.arctan(2.0 * (x - offs) / gamma) / np.pi)))

    tail = 0.5 * (1.0 - mass)
    reach = gamma * (1.0 / math.tan(math.pi * tail / 2.0) + 1.0) + float(np.max(np.abs(multiplet.offsets)))
    lo = brentq(lambda x: cdf(x) - tail, shift - 2 * reach, shift + 2 * reach, xtol=1e-14)
    hi = brentq(lambda x: cdf(x) - (1.0 - tail), shift - 2 * reach, shift + 2 * reach, xtol=1e-14)
    return lo, hi


def integrate_multiplet(spectrum: Spectrum, multiplet: Multiplet, true_shift: float, gamma: float,
                        mass: float = 0.95) -> float:
    """Concentration estimate from summing intensities over the central-mass
    window at the known shift, normalized by the multiplet's proton count so
    that an isolated noiseless multiplet of unit concentration gives 1."""
    L, R = central_interval(multiplet, true_shift, gamma, mass)
    x = spectrum.x
    inside = (x > L) & (x < R)
    if not inside.any():
        raise EstimationError(f"integration window [{L:.5f}, {R:.5f}] holds no grid points")
    return float(np.sum(spectrum.y[inside]) * spectrum.grid.spacing / (mass * multiplet.proton_count))


def integrate_multiplet_printed(spectrum: Spectrum, multiplet: Multiplet, true_shift: float, gamma: float,
                                mass: float = 0.95) -> float:
    """The literal ``sum(y) / (0.95 N (L - R))`` formula, kept for comparison."""
    L, R = central_interval(multiplet, true_shift, gamma, mass)
    inside = (spectrum.x > L) & (spectrum.x < R)
    N = int(inside.sum())
    if N == 0:
        raise EstimationError("integration window holds no grid points")
    return float(np.sum(spectrum.y[inside]) / (mass * N * (L - R)))


def integrate_catalog(spectrum: Spectrum, catalog: SignatureCatalog, true_shifts, gamma: float,
                      width_multipliers=None) -> np.ndarray:
    """Per-metabolite estimate: the mean over that metabolite's multiplets."""
    true_shifts = np.asarray(true_shifts, dtype=float)
    mult = np.ones(len(catalog)) if width_multipliers is None else np.asarray(width_multipliers, dtype=float)
    owner = catalog.owner
    est = np.zeros(len(catalog))
    for m in range(len(catalog)):
        idx = np.flatnonzero(owner == m)
        vals = [integrate_multiplet(spectrum, catalog.multiplets[u], true_shifts[u], gamma * mult[m]) for u in idx]
        est[m] = float(np.mean(vals))
    return est


# -- scoring ----------------------------------------------------------------------


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    shift_rows: list = field(default_factory=list)

    @property
    def mqe_bayes(self) -> float:
        return float(np.mean([(r["bayes"] - r["truth"]) ** 2 for r in self.rows]))

    @property
    def mqe_integration(self) -> float:
        return float(np.mean([(r["integration"] - r["truth"]) ** 2 for r in self.rows]))

    def fraction_within(self, tol: float) -> float:
        err = np.array([abs(r["error"]) for r in self.shift_rows])
        return float(np.mean(err <= tol)) if err.size else float("nan")

    def correlation(self, key: str) -> float:
        t = np.array([r["truth"] for r in self.rows])
        e = np.array([r[key] for r in self.rows])
        if t.size < 2 or np.std(t) == 0 or np.std(e) == 0:
            return float("nan")
        return float(np.corrcoef(t, e)[0, 1])

    def aggregates(self) -> dict:
        return {
            "items": len(self.rows),
            "shifts": len(self.shift_rows),
            "mqe_bayes": self.mqe_bayes,
            "mqe_integration": self.mqe_integration,
            "pearson_bayes": self.correlation("bayes"),
            "pearson_integration": self.correlation("integration"),
            "within_0.002": self.fraction_within(0.002),
            "within_0.015": self.fraction_within(0.015),
        }

    def extend(self, other: "BenchReport") -> "BenchReport":
        return BenchReport(self.rows + other.rows, self.shift_rows + other.shift_rows)

    def save(self, directory, stem: str = "report"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_rows(d / f"{stem}.csv", self.rows)
        _write_rows(d / f"{stem}_shifts.csv", self.shift_rows)
        (d / f"{stem}.json").write_text(json.dumps(self.aggregates(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory, stem: str = "report") -> "BenchReport":
        d = Path(directory)
        return cls(_read_rows(d / f"{stem}.csv"), _read_rows(d / f"{stem}_shifts.csv"))


def _write_rows(path, rows):
    fields = list(rows[0].keys()) if rows else ["replicate"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _read_rows(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                try:
                    row[k] = float(v) if k not in ("metabolite", "multiplet") else v
                except ValueError:
                    row[k] = v
            out.append(row)
    return out


def score(truth: Sequence[float], bayes: Sequence[float], integration: Sequence[float],
          true_shifts: Sequence[float] = (), est_shifts: Sequence[float] = (),
          names: Sequence[str] | None = None, multiplets: Sequence[str] | None = None,
          replicate: int = 0) -> BenchReport:
    """Rows for one replicate: concentrations per metabolite and shift errors per multiplet."""
    truth = np.asarray(truth, dtype=float)
    bayes = np.asarray(bayes, dtype=float)
    integration = np.asarray(integration, dtype=float)
    if not (truth.shape == bayes.shape == integration.shape):
        raise ValueError("truth and estimates must have the same length")
    ts = np.asarray(true_shifts, dtype=float)
    es = np.asarray(est_shifts, dtype=float)
    if ts.shape != es.shape:
        raise ValueError("true and estimated shifts must have the same length")
    names = list(names) if names is not None else [str(i) for i in range(truth.size)]
    labels = list(multiplets) if multiplets is not None else [str(i) for i in range(ts.size)]
    rows = [{"replicate": replicate, "metabolite": n, "truth": float(t), "bayes": float(b), "integration": float(i)}
            for n, t, b, i in zip(names, truth, bayes, integration)]
    srows = [{"replicate": replicate, "multiplet": lab, "truth": float(t), "estimate": float(e), "error": float(e - t)}
             for lab, t, e in zip(labels, ts, es)]
    return BenchReport(rows, srows)


# -- replicate driver ------------------------------------------------------------


def run_replicate(config: SimulationConfig, sampler=None, prior=None, replicate: int = 0,
                  fit_seed: int | None = None, catalog: SignatureCatalog | None = None):
    """Simulate one spectrum, fit it, run the comparator and score both.

    Concentrations are reported on the raw (pre-standardization) scale.
    Returns ``(BenchReport, PosteriorSummary)``.
    """
    from . import mcmc

    catalog = catalog or config.load_catalog()
    spectrum, truth = simulate(config, catalog)
    seed = config.seed + 1 if fit_seed is None else fit_seed
    _, summ, _ = mcmc.run(spectrum, catalog, prior, sampler, seed=seed)
    f = truth.standardization_factor
    integ = integrate_catalog(spectrum, catalog, truth.shifts, truth.gamma, truth.width_multipliers) * f
    report = score(truth.concentrations, summ.beta["mean"] * f, integ, truth.shifts, summ.shifts[0]["mean"],
                   catalog.names, mcmc.multiplet_labels(catalog), replicate)
    return report, summ


def replicate_seeds(base_seed: int, count: int) -> list:
    """Independent per-replicate seeds derived from one base seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(base_seed).spawn(count)]


def run_bench(config: SimulationConfig, replicates: int, sampler=None, prior=None,
              callback=None) -> BenchReport:
    catalog = config.load_catalog()
    report = BenchReport()
    for r, seed in enumerate(replicate_seeds(config.seed, replicates)):
        rep, _ = run_replicate(replace(config, seed=seed), sampler, prior, r, catalog=catalog)
        report = report.extend(rep)
        if callback is not None:
            callback(r, rep)
    return report
