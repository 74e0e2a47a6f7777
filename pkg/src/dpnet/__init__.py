"""Null-space and data-proximal null-space networks for limited-angle CT.

Submodules: ``linop`` (operators, CGLS, projections), ``tomo`` (Radon
transform, FBP), ``phantom`` (phantoms, noise, datasets), ``regularizers``
(FBP, TV, spectral filters), ``network`` and ``proxnet`` (the residual
architectures and their training), ``analysis`` (metrics and rate
studies), ``verify`` and ``cli``.
"""

__version__ = "0.1.0"
