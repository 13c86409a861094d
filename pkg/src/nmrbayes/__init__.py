"""Bayesian deconvolution of one-dimensional NMR spectra into metabolite
concentrations, with a wavelet model for everything the catalog misses."""

__version__ = "0.1.0"
