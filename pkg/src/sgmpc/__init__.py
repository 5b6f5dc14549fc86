"""Output-feedback MPC with chance constraints under biased sub-Gaussian
measurement noise, with a synthetic drilling plant and Monte-Carlo harness."""

__version__ = "0.1.0"
