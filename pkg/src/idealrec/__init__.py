"""Device-cloud collaborative recommendation with learned parameter-request gating."""

__version__ = "0.1.0"
