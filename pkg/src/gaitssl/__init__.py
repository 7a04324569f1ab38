"""Self-supervised pretraining of transformer encoders on multivariate gait windows."""

__version__ = "0.1.0"
