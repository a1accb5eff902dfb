"""Joint (k, q)-space compressed sensing for single-shell HARDI.

Modules
-------
core      grids, gradient schemes, volumes, centred FFTs, tensor files
spatial   Haar wavelets and the isotropic-TV gradient operator
angular   the angular dictionary ``Gamma`` and ODF estimation
sampling  (k, q) masks and the sampling operator
solver    smoothed FISTA for the SAAS and Prior models
phantom   synthetic crossing-fibre phantom
evaluation  sweeps, error metrics, ODF peaks and glyph export
"""

__version__ = "0.1.0"
