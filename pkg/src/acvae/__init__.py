"""VAEs with arbitrary conditioning: partial-posterior encoders, conditional
likelihood estimation, imputation, greedy active feature acquisition, and
partially observed clustering, all on a small numpy autodiff engine."""

__version__ = "0.1.0"
