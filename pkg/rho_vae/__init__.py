"""AR(1)-correlated Gaussian posteriors for variational autoencoders."""

__version__ = "1.0.0"
