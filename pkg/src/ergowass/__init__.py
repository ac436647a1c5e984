"""Monte Carlo laboratory for Wasserstein convergence of empirical measures of ergodic diffusions."""

__version__ = "0.1.0"
