"""Numerical laboratory for a strongly driven transmon.

Modules:

* ``params``     – circuit vs dimensionless model parameters, unit rescaling
* ``chaoscrit``  – analytic chaos criteria (resonances, thresholds, diffusion,
                   localization)
* ``pendulum``   – classical driven-pendulum ensembles (symplectic integrator,
                   stroboscopic sections, momentum statistics)
* ``qtransmon``  – quantum model in the charge basis (split-step propagator,
                   one-period spectra, phase-space tools, matrix elements)
* ``rbm``        – reflected-Brownian-motion noise surrogate (paths,
                   correlation, spectra, golden-rule rates)
* ``tlsdyn``     – two-level "noise spectrometer" driven by the three models
* ``records``    – time-series records, CSV emission, run manifests
* ``experiments``– experiment runner behind the command-line interface
"""

__version__ = "0.1.0"
