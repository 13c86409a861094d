"""The half-plane penalty on the wavelet component.

Alanine's doublet sits inside a broad resonance while its quartet is in the
clear. Without the penalty the template soaks up the broad mass and the
wavelet component pays with a negative dip under the quartet.
"""
import math

import numpy as np

from nmrbayes import mcmc
from nmrbayes import posterior as P
from nmrbayes.spectrum import ChemicalShiftGrid, Spectrum
from nmrbayes.templates import build_template_matrix, load_bundled_catalog

cat = load_bundled_catalog().subset(["alanine"])
grid = ChemicalShiftGrid.regular(1.0, 4.2, 2048)
T = build_template_matrix(cat, 1.5 / 600, cat.shift_estimates, None, grid).values
x = grid.points
broad = 3.0 * (2 / math.pi) * 0.015 / (4 * (x - cat.shift_estimates[0]) ** 2 + 0.015**2)
y = T[:, 0] + broad + np.random.default_rng(80).normal(0, 0.2, grid.n)
factor = y.sum()
spectrum = Spectrum(grid, y / factor)

sampler = mcmc.SamplerConfig(iterations=4000, burnin=2000, chains=1, t_start=4.0)
for label, prior in [("penalty on", P.PriorConfig()), ("penalty off", P.PriorConfig(r=1e-12))]:
    _, summary, _ = mcmc.run(spectrum, cat, prior, sampler, seed=1)
    beta = summary.beta["mean"][0] * factor
    print(f"{label:<12} beta {beta:.3f} (truth 1)   min xi {summary.xi_mean[0].min() * factor:8.2f}")
