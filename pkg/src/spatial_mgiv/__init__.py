"""Mean-group IV estimation for heterogeneous spatial dynamic panels with interactive effects."""

__version__ = "0.1.0"
