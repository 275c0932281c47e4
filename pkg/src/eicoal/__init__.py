"""EI coalescent inference of time-varying reproduction numbers from dated genealogies."""

__version__ = "0.1.0"
