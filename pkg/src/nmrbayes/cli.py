"""Command-line front end: ``nmrbayes fit | simulate | integrate | evaluate``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, bench, mcmc
from .posterior import PriorConfig
from .spectrum import Spectrum, SpectrumError, SpectrumSet, load_spectrum, restrict, save_spectrum
from .templates import CatalogError, bundled_catalog_path, catalog_to_dict, load_catalog

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration -----------------------------------------------------------


def _defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def config_reference() -> str:
    """Markdown listing of every configuration key and its default."""
    out = ["# Configuration reference", "",
           "A run is configured by one JSON document with optional sections",
           "`prior`, `sampler` and `simulation`, plus `spectrometer_frequency` (MHz)",
           "and `standardize` (bool). Command-line flags override the file.", ""]
    for title, cls in (("prior", PriorConfig), ("sampler", mcmc.SamplerConfig),
                       ("simulation", bench.SimulationConfig)):
        out += [f"## `{title}`", "", "| key | default |", "|---|---|"]
        for k, v in _defaults(cls).items():
            out.append(f"| `{k}` | `{json.dumps(v)}` |")
        out.append("")
    return "\n".join(out)


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{p}: top level must be an object")
    unknown = set(doc) - {"prior", "sampler", "simulation", "spectrometer_frequency", "standardize"}
    if unknown:
        raise UsageError(f"{p}: unknown sections {sorted(unknown)}")
    return doc


def _build(cls, section: dict, what: str):
    try:
        return cls.from_dict(section or {})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} configuration: {exc}") from exc


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(type(v))


def _sha(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"nmrbayes": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _catalog(arg, F):
    if arg is None:
        raise UsageError("a catalog is required (--catalog PATH or a bundled name)")
    p = Path(arg)
    if not p.exists():
        bundled = bundled_catalog_path(arg)
        if not bundled.exists():
            raise UsageError(f"catalog not found: {arg}")
        p = bundled
    return load_catalog(p, F), p


def _region(text):
    if text is None:
        return None
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--region expects LO:HI, got {text!r}") from None
    return lo, hi


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_csv(path) -> list:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"file not found: {p}")
    with open(p, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- plotting -------------------------------------------------------------------

_COLOURS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def deconvolution_svg(x, y, components: dict, xi, width: int = 960, height: int = 420) -> str:
    """Data in black, fitted templates in colour, the wavelet part dashed.
    The ppm axis runs right to left."""
    x = np.asarray(x, dtype=float)
    series = [np.asarray(y, dtype=float), np.asarray(xi, dtype=float)] + [np.asarray(c) for c in components.values()]
    lo = min(float(s.min()) for s in series)
    hi = max(float(s.max()) for s in series)
    if hi <= lo:
        hi = lo + 1.0
    ml, mr, mt, mb = 60, 150, 20, 40
    pw, ph = width - ml - mr, height - mt - mb
    xmin, xmax = float(x.min()), float(x.max())
    span = xmax - xmin or 1.0

    def path(v):
        px = ml + (xmax - x) / span * pw
        py = mt + (hi - v) / (hi - lo) * ph
        return "M" + " L".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>',
           f'<path d="{path(y)}" fill="none" stroke="#000" stroke-width="0.8"/>',
           f'<path d="{path(xi)}" fill="none" stroke="#555" stroke-width="1" stroke-dasharray="5,3"/>']
    legend = [("data", "#000", ""), ("wavelet", "#555", ' stroke-dasharray="5,3"')]
    for i, (name, comp) in enumerate(components.items()):
        col = _COLOURS[i % len(_COLOURS)]
        out.append(f'<path d="{path(comp)}" fill="none" stroke="{col}" stroke-width="1"/>')
        legend.append((name, col, ""))
    for i in range(5):
        v = xmin + span * i / 4
        px = ml + (xmax - v) / span * pw
        out.append(f'<text x="{px:.1f}" y="{height - 15}" font-size="11" text-anchor="middle">{v:.2f}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 2}" font-size="11" text-anchor="middle">ppm</text>')
    for i, (name, col, dash) in enumerate(legend):
        ly = mt + 12 + 14 * i
        out.append(f'<line x1="{width - mr + 10}" y1="{ly}" x2="{width - mr + 30}" y2="{ly}" '
                   f'stroke="{col}"{dash}/>')
        out.append(f'<text x="{width - mr + 35}" y="{ly + 4}" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# -- subcommands ----------------------------------------------------------------


def cmd_fit(args) -> int:
    doc = _load_config(args.config)
    F = float(doc.get("spectrometer_frequency", 600.0))
    prior = _build(PriorConfig, doc.get("prior"), "prior")
    sampler_kw = dict(doc.get("sampler") or {})
    for flag, key in (("chains", "chains"), ("iters", "iterations"), ("burnin", "burnin")):
        if getattr(args, flag) is not None:
            sampler_kw[key] = getattr(args, flag)
    sampler = _build(mcmc.SamplerConfig, sampler_kw, "sampler")
    if not args.spectrum:
        raise UsageError("at least one --spectrum is required")
    catalog, cat_path = _catalog(args.catalog, F)
    spectra = []
    for path in args.spectrum:
        if not Path(path).exists():
            raise UsageError(f"spectrum not found: {path}")
        spectra.append(load_spectrum(path, F))
    region = _region(args.region)
    if region is not None:
        spectra = [restrict(s, *region) for s in spectra]
    factor = 1.0
    if doc.get("standardize", True):
        # one common factor keeps the concentrations shared across replicates
        factor = float(np.mean([np.sum(s.y) for s in spectra]))
        if not factor > 0:
            raise DataError("spectra have no positive total intensity to standardize")
        spectra = [s.scaled(1.0 / factor) for s in spectra]
    seed = args.seed if args.seed is not None else int(np.random.SeedSequence().entropy % (2**63))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log, summ, seed = mcmc.run(SpectrumSet(tuple(spectra)), catalog, prior, sampler, seed=seed)

    table = log.table().copy()
    cols = log.columns()
    M = len(catalog)
    table[:, 1 : 1 + M] *= factor
    _write_csv(out / "samples.csv", cols, table.tolist())
    rows = [[r["metabolite"], r["mean"], r["sd"], r["q2.5"], r["q97.5"], r["ess"]]
            for r in _beta_rows(table[:, 1 : 1 + M], catalog.names)]
    _write_csv(out / "summary.csv", ["metabolite", "mean", "sd", "q2.5", "q97.5", "ess"], rows)
    srows = []
    for s, sh in enumerate(summ.shifts):
        for u, lab in enumerate(summ.multiplet_labels):
            srows.append([s, lab, catalog.multiplets[u].shift_estimate, sh["mean"][u], sh["sd"][u],
                          sh["q2.5"][u], sh["q97.5"][u]])
    _write_csv(out / "shifts.csv", ["spectrum", "multiplet", "prior_mean", "mean", "sd", "q2.5", "q97.5"], srows)
    _write_csv(out / "acceptance.csv", ["slot", "move", "accepted", "tried", "rate"],
               [[a["slot"], a["move"], a["accepted"], a["tried"], a["rate"]] for a in log.acceptance])
    if not args.no_plot:
        sp = spectra[0]
        comps = {name: summ.fitted_templates[0][:, m] * factor for m, name in enumerate(catalog.names)}
        svg = deconvolution_svg(sp.x, sp.y * factor, comps, summ.xi_mean[0] * factor)
        (out / "deconvolution.svg").write_text(svg, encoding="utf-8")
    config = {"prior": prior.to_dict(), "sampler": sampler.to_dict(), "spectrometer_frequency": F,
              "standardize": bool(doc.get("standardize", True))}
    manifest = {
        "command": "fit",
        "config": config,
        "config_sha256": _sha(config),
        "seed": seed,
        "threads": args.threads,
        "spectra": [{"path": str(p), "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
                    for p in args.spectrum],
        "region": list(region) if region else None,
        "standardization_factor": factor,
        "catalog": {"path": str(cat_path), "sha256": _sha(catalog_to_dict(catalog))},
        "versions": _versions(),
        "outputs": sorted(p.name for p in out.iterdir()),
    }
    (out / "run-manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n",
                                           encoding="utf-8")
    print(f"wrote {len(manifest['outputs']) + 1} files to {out}")
    return EXIT_OK


def _beta_rows(draws: np.ndarray, names) -> list:
    stats = mcmc._stats(draws)
    return [{"metabolite": n, "mean": stats["mean"][m], "sd": stats["sd"][m], "q2.5": stats["q2.5"][m],
             "q97.5": stats["q97.5"][m], "ess": stats["ess"][m]} for m, n in enumerate(names)]


def cmd_simulate(args) -> int:
    doc = _load_config(args.config)
    sim = dict(doc.get("simulation") or {})
    if args.seed is not None:
        sim["seed"] = args.seed
    if args.catalog is not None:
        sim["catalog"] = args.catalog
    cfg = _build(bench.SimulationConfig, sim, "simulation")
    try:
        catalog = cfg.load_catalog()
    except FileNotFoundError as exc:
        raise UsageError(f"catalog not found: {cfg.catalog}") from exc
    spectrum, truth = bench.simulate(cfg, catalog)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_spectrum(spectrum, out / "spectrum.txt", header="ppm,intensity (standardized to unit sum)")
    truth.save(out / "truth.json")
    (out / "simulation.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote spectrum.txt, truth.json, simulation.json to {out}")
    return EXIT_OK


def _truth(path) -> bench.GroundTruth:
    if path is None:
        raise UsageError("--truth is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"truth file not found: {p}")
    try:
        return bench.GroundTruth.load(p)
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DataError(f"{p}: not a ground-truth file ({exc})") from exc


def cmd_integrate(args) -> int:
    doc = _load_config(args.config)
    F = float(doc.get("spectrometer_frequency", 600.0))
    truth = _truth(args.truth)
    catalog, _ = _catalog(args.catalog or "simulation12", F)
    if list(catalog.names) != list(truth.metabolites):
        raise DataError("catalog metabolites do not match the truth file")
    if not args.spectrum or not Path(args.spectrum[0]).exists():
        raise UsageError("--spectrum PATH is required")
    spectrum = load_spectrum(args.spectrum[0], F)
    est = bench.integrate_catalog(spectrum, catalog, truth.shifts, truth.gamma, truth.width_multipliers)
    est = est * truth.standardization_factor
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "integration.csv", ["metabolite", "estimate"], list(zip(catalog.names, est)))
    print(f"wrote integration.csv to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth = _truth(args.truth)
    if args.fit is None or args.integration is None:
        raise UsageError("--fit DIR and --integration CSV are required")
    summary = _read_csv(Path(args.fit) / "summary.csv")
    integ = _read_csv(args.integration)
    manifest = json.loads((Path(args.fit) / "run-manifest.json").read_text(encoding="utf-8")) \
        if (Path(args.fit) / "run-manifest.json").exists() else {}
    names = list(truth.metabolites)
    if [r["metabolite"] for r in summary] != names or [r["metabolite"] for r in integ] != names:
        raise DataError("metabolites in the estimates do not line up with the truth file")
    # the fitted spectrum is the standardized simulator output
    f = truth.standardization_factor
    bayes = np.array([float(r["mean"]) for r in summary]) * f
    integration = np.array([float(r["estimate"]) for r in integ])
    shifts = _read_csv(Path(args.fit) / "shifts.csv")
    est_shifts = np.array([float(r["mean"]) for r in shifts if int(r["spectrum"]) == 0])
    if est_shifts.size != truth.shifts.size:
        raise DataError("shift estimates do not line up with the truth file")
    labels = [r["multiplet"] for r in shifts if int(r["spectrum"]) == 0]
    report = bench.score(truth.concentrations, bayes, integration, truth.shifts, est_shifts, names, labels)
    out = Path(args.out)
    report.save(out)
    agg = report.aggregates()
    _write_csv(out / "shift_table.csv", ["within_ppm", "fraction"],
               [[0.002, agg["within_0.002"]], [0.015, agg["within_0.015"]]])
    if manifest:
        agg["fit_seed"] = manifest.get("seed")
    print(json.dumps(agg, indent=2))
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nmrbayes", description="Bayesian deconvolution of 1D NMR spectra.")
    parser.add_argument("--version", action="version", version=f"nmrbayes {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON configuration (see the config reference)")
        p.add_argument("--out", metavar="DIR", default=".", help="output directory")
        p.add_argument("--seed", type=int, metavar="N", help="random seed (drawn and recorded if absent)")
        p.add_argument("--threads", type=int, metavar="N", default=1,
                       help="accepted for compatibility; chains run in one thread")

    fit = sub.add_parser("fit", help="sample the posterior for one or more spectra",
                         epilog=config_reference(), formatter_class=argparse.RawDescriptionHelpFormatter)
    common(fit)
    fit.add_argument("--spectrum", action="append", metavar="PATH",
                     help="two-column ppm,intensity file; repeat for replicates sharing concentrations")
    fit.add_argument("--catalog", metavar="PATH", help="catalog JSON file or bundled catalog name")
    fit.add_argument("--chains", type=int)
    fit.add_argument("--iters", type=int)
    fit.add_argument("--burnin", type=int)
    fit.add_argument("--region", metavar="LO:HI", help="restrict the spectra to this ppm range")
    fit.add_argument("--no-plot", action="store_true", help="skip deconvolution.svg")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="simulate a spectrum with known concentrations")
    common(sim)
    sim.add_argument("--catalog", metavar="PATH")
    sim.set_defaults(func=cmd_simulate)

    integ = sub.add_parser("integrate", help="numerical-integration estimates at the known shifts")
    common(integ)
    integ.add_argument("--spectrum", action="append", metavar="PATH")
    integ.add_argument("--truth", metavar="PATH")
    integ.add_argument("--catalog", metavar="PATH")
    integ.set_defaults(func=cmd_integrate)

    ev = sub.add_parser("evaluate", help="score a fit and the integration estimates against the truth")
    common(ev)
    ev.add_argument("--truth", metavar="PATH")
    ev.add_argument("--fit", metavar="DIR", help="output directory of a fit run")
    ev.add_argument("--integration", metavar="PATH", help="integration.csv")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nmrbayes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except mcmc.ConfigurationError as exc:
        print(f"nmrbayes: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except mcmc.ChainFault as exc:
        print(f"nmrbayes: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SpectrumError, CatalogError, ValueError) as exc:
        print(f"nmrbayes: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"nmrbayes: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
