"""Semi-parametric predictive control: spectral collocation, GP residuals, online MPC."""

__version__ = "0.1.0"
