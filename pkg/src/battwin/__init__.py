"""Battery digital-twin numerics toolkit."""
__version__ = "0.1.0"
