"""Graph-network surrogates for I-beam FEA with physics-informed fine-tuning."""

__version__ = "0.1.0"
