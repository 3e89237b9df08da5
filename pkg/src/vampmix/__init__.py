"""VampPrior Mixture Model priors for small VAEs, trained by alternating VI and Empirical-Bayes EM."""

__version__ = "0.1.0"
