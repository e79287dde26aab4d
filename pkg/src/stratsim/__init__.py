"""Double-sampling stratified simulation for multi-limit-state reliability."""
__version__ = "0.1.0"
