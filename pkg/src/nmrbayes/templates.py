"""Metabolite signature templates built from Lorentzian peaks and multiplets.

A template is a proton-weighted sum of multiplet curves; a multiplet curve is a
weighted average of translated Lorentzians whose weights sum to one and whose
offsets have zero centre of mass. Everything is held in ppm; J-couplings given
in Hz are converted with the spectrometer frequency when a catalog is loaded.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from math import comb
from pathlib import Path

import numpy as np

from .spectrum import ChemicalShiftGrid

#: peaks contribute only within this many peak-widths of their centre
TAIL_WIDTHS = 200.0

DEFAULT_SHIFT_SD = 0.01
DEFAULT_SHIFT_HALFWIDTH = 0.03

KINDS = {
    "singlet": 0,
    "doublet": 1,
    "triplet": 1,
    "quartet": 1,
    "quintet": 1,
    "doublet-of-doublets": 2,
    "triplet-of-doublets": 2,
}
EXPLICIT = "explicit-peak-list"


class CatalogError(ValueError):
    pass


def lorentzian(gamma, x):
    """Unit-area Lorentzian with full width at half height ``gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("peak-width must be positive")
    x = np.asarray(x, dtype=float)
    return (2.0 / np.pi) * gamma / (4.0 * x * x + gamma * gamma)


def _line(order: int, spacing: float):
    k = np.arange(order + 1)
    return (k - order / 2.0) * spacing, np.array([comb(order, int(i)) for i in k], dtype=float)


def _merge(offsets, weights, tol=1e-12):
    order = np.argsort(offsets, kind="stable")
    offsets, weights = offsets[order], weights[order]
    out_o, out_w = [offsets[0]], [weights[0]]
    for o, w in zip(offsets[1:], weights[1:]):
        if abs(o - out_o[-1]) <= tol:
            out_w[-1] += w
        else:
            out_o.append(o)
            out_w.append(w)
    w = np.array(out_w)
    return np.array(out_o), w / w.sum()


def expand_multiplet_kind(kind: str, j_couplings, spectrometer_frequency: float):
    """First-order peak pattern of a multiplet.

    Returns ``(offsets_ppm, weights)``, sorted by offset. Splitting by ``n``
    equivalent neighbours gives ``n + 1`` lines with binomial intensities,
    each separated by J; compound kinds are products of simple ones.
    """
    if kind not in KINDS:
        raise CatalogError(f"unknown multiplet kind {kind!r}")
    j = [float(v) for v in (j_couplings or ())]
    if len(j) != KINDS[kind]:
        raise CatalogError(f"{kind} needs {KINDS[kind]} J-coupling(s), got {len(j)}")
    if any(v <= 0 for v in j):
        raise CatalogError("J-couplings must be positive")
    F = float(spectrometer_frequency)
    j = [v / F for v in j]

    if kind == "singlet":
        return np.zeros(1), np.ones(1)
    if kind in ("doublet", "triplet", "quartet", "quintet"):
        order = {"doublet": 1, "triplet": 2, "quartet": 3, "quintet": 4}[kind]
        parts = [(order, j[0])]
    elif kind == "doublet-of-doublets":
        parts = [(1, j[0]), (1, j[1])]
    else:  # triplet-of-doublets: triplet on the first coupling, doublet on the second
        parts = [(2, j[0]), (1, j[1])]

    offsets, weights = np.zeros(1), np.ones(1)
    for order, spacing in parts:
        o, w = _line(order, spacing)
        offsets = (offsets[:, None] + o[None, :]).ravel()
        weights = (weights[:, None] * w[None, :]).ravel()
    return _merge(offsets, weights)


@dataclass(frozen=True, eq=False)
class Multiplet:
    shift_estimate: float
    proton_count: float
    offsets: np.ndarray
    weights: np.ndarray
    kind: str = "singlet"
    j_couplings: tuple = ()
    shift_prior_sd: float = DEFAULT_SHIFT_SD
    shift_prior_halfwidth: float = DEFAULT_SHIFT_HALFWIDTH

    def __post_init__(self):
        o = np.array(self.offsets, dtype=float).ravel()
        w = np.array(self.weights, dtype=float).ravel()
        o.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "offsets", o)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "j_couplings", tuple(float(v) for v in self.j_couplings))
        if o.size == 0 or o.shape != w.shape:
            raise CatalogError("multiplet needs matching, nonempty offsets and weights")
        if not self.proton_count > 0:
            raise CatalogError("proton count must be positive")
        if np.any(w <= 0):
            raise CatalogError("peak weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise CatalogError(f"peak weights sum to {w.sum()!r}, not 1")
        if abs(np.dot(w, o)) > 1e-12:
            raise CatalogError("peak offsets are not centred on the multiplet centre of mass")
        if not (self.shift_prior_sd > 0 and self.shift_prior_halfwidth > 0):
            raise CatalogError("shift prior sd and halfwidth must be positive")
        if self.kind != EXPLICIT and not _is_symmetric(o, w):
            raise CatalogError(f"{self.kind} peaks are not symmetric about the centre")

    @classmethod
    def from_kind(cls, kind, shift, protons, j_couplings=(), spectrometer_frequency=600.0, **prior):
        offsets, weights = expand_multiplet_kind(kind, j_couplings, spectrometer_frequency)
        return cls(shift, protons, offsets, weights, kind, tuple(j_couplings or ()), **prior)

    @property
    def n_peaks(self) -> int:
        return self.offsets.size

    @property
    def prior_bounds(self):
        hw = self.shift_prior_halfwidth
        return self.shift_estimate - hw, self.shift_estimate + hw


def _is_symmetric(offsets, weights, tol=1e-9) -> bool:
    order = np.argsort(offsets)
    rev = np.argsort(-offsets)
    return bool(
        np.allclose(offsets[order], -offsets[rev], atol=tol)
        and np.allclose(weights[order], weights[rev], atol=tol)
    )


@dataclass(frozen=True, eq=False)
class MetaboliteTemplate:
    name: str
    multiplets: tuple

    def __post_init__(self):
        mults = tuple(self.multiplets)
        object.__setattr__(self, "multiplets", mults)
        if not mults:
            raise CatalogError(f"{self.name}: template has no multiplets")
        if not sum(m.proton_count for m in mults) > 0:
            raise CatalogError(f"{self.name}: total proton count must be positive")

    @property
    def total_protons(self) -> float:
        return float(sum(m.proton_count for m in self.multiplets))


@dataclass(frozen=True, eq=False)
class SignatureCatalog:
    templates: tuple = ()
    spectrometer_frequency: float = 600.0

    def __post_init__(self):
        temps = tuple(self.templates)
        object.__setattr__(self, "templates", temps)
        names = [t.name for t in temps]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise CatalogError(f"duplicate metabolite names: {sorted(dupes)}")

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    @property
    def names(self) -> list:
        return [t.name for t in self.templates]

    @property
    def multiplets(self) -> list:
        """All multiplets in catalog order, flattened."""
        return [mu for t in self.templates for mu in t.multiplets]

    @property
    def owner(self) -> np.ndarray:
        """Metabolite index of each flattened multiplet."""
        return np.array([m for m, t in enumerate(self.templates) for _ in t.multiplets], dtype=int)

    @property
    def shift_estimates(self) -> np.ndarray:
        return np.array([mu.shift_estimate for mu in self.multiplets])

    def subset(self, names) -> "SignatureCatalog":
        by_name = {t.name: t for t in self.templates}
        return SignatureCatalog(tuple(by_name[n] for n in names), self.spectrometer_frequency)

    def with_shift_prior(self, sd: float | None = None, halfwidth: float | None = None) -> "SignatureCatalog":
        """Same catalog with every multiplet's shift prior overridden."""
        temps = []
        for t in self.templates:
            mults = tuple(
                replace(
                    mu,
                    shift_prior_sd=mu.shift_prior_sd if sd is None else sd,
                    shift_prior_halfwidth=mu.shift_prior_halfwidth if halfwidth is None else halfwidth,
                )
                for mu in t.multiplets
            )
            temps.append(MetaboliteTemplate(t.name, mults))
        return SignatureCatalog(tuple(temps), self.spectrometer_frequency)


# -- evaluation -------------------------------------------------------------


def multiplet_curve(m: Multiplet, gamma: float, delta_star: float, x):
    """Unit-area multiplet curve centred (by centre of mass) at ``delta_star``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(np.shape(x))
    for c, w in zip(m.offsets, m.weights):
        out += w * lorentzian(gamma, x - delta_star - c)
    return out


def multiplet_on_grid(m: Multiplet, gamma: float, shift: float, x0: float, dx: float, n: int):
    """Proton-weighted multiplet on a regular grid, tails cut at ``TAIL_WIDTHS``.

    Returns ``(start, values)`` with ``values`` covering grid indices
    ``start:start + len(values)``.
    """
    if not gamma > 0:
        raise ValueError("peak-width must be positive")
    reach = TAIL_WIDTHS * gamma
    centres = shift + m.offsets
    lo = np.clip(np.ceil((centres - reach - x0) / dx - 1e-9).astype(int), 0, n)
    hi = np.clip(np.floor((centres + reach - x0) / dx + 1e-9).astype(int) + 1, 0, n)
    start, stop = int(lo.min()), int(hi.max())
    vals = np.zeros(max(stop - start, 0))
    if stop <= start:
        return start, vals
    c2 = (2.0 / np.pi) * gamma
    g2 = gamma * gamma
    for c, w, a, b in zip(centres, m.weights, lo, hi):
        if b <= a:
            continue
        d = x0 + dx * np.arange(a, b) - c
        vals[a - start : b - start] += w * c2 / (4.0 * d * d + g2)
    vals *= m.proton_count
    return start, vals


def _grid_params(grid: ChemicalShiftGrid):
    return float(grid.points[0]), grid.spacing, grid.n


def evaluate_template(t: MetaboliteTemplate, gamma: float, shifts, grid: ChemicalShiftGrid):
    """Template column on ``grid`` for one shift per multiplet."""
    shifts = np.atleast_1d(np.asarray(shifts, dtype=float))
    if shifts.size != len(t.multiplets):
        raise ValueError(f"{t.name}: need {len(t.multiplets)} shifts, got {shifts.size}")
    x0, dx, n = _grid_params(grid)
    col = np.zeros(n)
    for mu, s in zip(t.multiplets, shifts):
        start, vals = multiplet_on_grid(mu, gamma, s, x0, dx, n)
        col[start : start + vals.size] += vals
    return col


@dataclass(frozen=True, eq=False)
class TemplateMatrix:
    values: np.ndarray
    gamma: float
    shifts: np.ndarray
    re: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def build_template_matrix(catalog: SignatureCatalog, gamma: float, shifts, re, grid: ChemicalShiftGrid):
    """n x M matrix of templates; column m uses peak-width ``gamma * exp(re[m])``."""
    M = len(catalog)
    shifts = np.asarray(shifts, dtype=float)
    re = np.zeros(M) if re is None else np.asarray(re, dtype=float)
    if shifts.size != len(catalog.multiplets):
        raise ValueError("one shift per catalog multiplet is required")
    if re.size != M:
        raise ValueError("one random effect per metabolite is required")
    values = np.zeros((grid.n, M))
    k = 0
    for m, t in enumerate(catalog.templates):
        u = len(t.multiplets)
        values[:, m] = evaluate_template(t, gamma * np.exp(re[m]), shifts[k : k + u], grid)
        k += u
    return TemplateMatrix(values, float(gamma), shifts.copy(), re.copy())


# -- catalog files ------------------------------------------------------------


def _parse_multiplet(name, i, spec, F):
    where = f"{name}, multiplet {i}"
    try:
        shift = float(spec["shift_ppm"])
        protons = float(spec["protons"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CatalogError(f"{where}: needs numeric shift_ppm and protons") from exc
    if not protons > 0:
        raise CatalogError(f"{where}: protons must be positive")
    prior = dict(
        shift_prior_sd=float(spec.get("shift_prior_sd_ppm", DEFAULT_SHIFT_SD)),
        shift_prior_halfwidth=float(spec.get("shift_prior_halfwidth_ppm", DEFAULT_SHIFT_HALFWIDTH)),
    )
    kind = spec.get("kind")
    peaks = spec.get("peaks")
    if peaks is not None and kind not in (None, EXPLICIT):
        raise CatalogError(f"{where}: give either kind/j_hz or peaks, not both")
    try:
        if peaks is not None:
            if not peaks:
                raise CatalogError("empty peak list")
            off = np.array([float(p["offset_hz"]) for p in peaks]) / F
            w = np.array([float(p["weight"]) for p in peaks])
            if np.any(w <= 0):
                raise CatalogError("peak weights must be positive")
            w_n = w / w.sum()
            com = float(np.dot(w_n, off))
            off_n = off - com
            adjust = max(abs(com), float(np.max(np.abs(w_n - w))))
            if adjust > 1e-6:
                warnings.warn(
                    f"{where}: explicit peak list recentred/renormalized (max adjustment {adjust:.3g})",
                    stacklevel=3,
                )
            # exact zero centre of mass after renormalization
            off_n = off_n - np.dot(w_n, off_n)
            return Multiplet(shift, protons, off_n, w_n, EXPLICIT, (), **prior)
        if kind is None:
            raise CatalogError("missing kind")
        return Multiplet.from_kind(kind, shift, protons, spec.get("j_hz") or (), F, **prior)
    except CatalogError as exc:
        raise CatalogError(f"{where}: {exc}") from None


def catalog_from_dict(doc: dict, spectrometer_frequency: float | None = None) -> SignatureCatalog:
    if not isinstance(doc, dict) or not isinstance(doc.get("metabolites"), list):
        raise CatalogError("catalog must be an object with a 'metabolites' list")
    F = float(spectrometer_frequency or doc.get("spectrometer_frequency_mhz", 600.0))
    templates = []
    for entry in doc["metabolites"]:
        try:
            name = str(entry["name"])
            mults = entry["multiplets"]
        except (KeyError, TypeError) as exc:
            raise CatalogError("each metabolite needs a name and a multiplets list") from exc
        if not isinstance(mults, list) or not mults:
            raise CatalogError(f"{name}: multiplets must be a nonempty list")
        parsed = tuple(_parse_multiplet(name, i, spec, F) for i, spec in enumerate(mults))
        templates.append(MetaboliteTemplate(name, parsed))
    return SignatureCatalog(tuple(templates), F)


def load_catalog(path, spectrometer_frequency: float | None = None) -> SignatureCatalog:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CatalogError(f"{path}: not valid JSON ({exc})") from exc
    return catalog_from_dict(doc, spectrometer_frequency)


def catalog_to_dict(catalog: SignatureCatalog) -> dict:
    F = catalog.spectrometer_frequency
    out = []
    for t in catalog.templates:
        mults = []
        for mu in t.multiplets:
            d = {
                "shift_ppm": mu.shift_estimate,
                "protons": mu.proton_count,
                "shift_prior_sd_ppm": mu.shift_prior_sd,
                "shift_prior_halfwidth_ppm": mu.shift_prior_halfwidth,
            }
            if mu.kind == EXPLICIT:
                d["peaks"] = [
                    {"offset_hz": float(o * F), "weight": float(w)} for o, w in zip(mu.offsets, mu.weights)
                ]
            else:
                d["kind"] = mu.kind
                if mu.j_couplings:
                    d["j_hz"] = list(mu.j_couplings)
            mults.append(d)
        out.append({"name": t.name, "multiplets": mults})
    return {"spectrometer_frequency_mhz": F, "metabolites": out}


def bundled_catalog_path(name: str = "simulation12") -> Path:
    return Path(__file__).with_name("data") / f"{name}.json"


def load_bundled_catalog(name: str = "simulation12", spectrometer_frequency: float | None = None):
    return load_catalog(bundled_catalog_path(name), spectrometer_frequency)
