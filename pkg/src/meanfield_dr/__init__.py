"""Mean-field demand response: population simulation, QoS analysis, spectral risk tools."""

__version__ = "0.1.0"
