"""Maximum-likelihood inference for HMMs coupled with latent Gaussian fields.

The package provides a banded forward algorithm whose log-likelihood has a
sparse Hessian in the latent variables, SPDE/finite-element GMRF precision
matrices, and a Laplace-approximated marginal likelihood with nested
numerical optimization, plus simulation and benchmarking harnesses.
"""

__version__ = "0.1.0"

from . import exceptions, hmm, sparse  # noqa: F401
