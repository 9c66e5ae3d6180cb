"""Mapping intra-annual seasonality of case counts from facility records."""

__version__ = "0.1.0"
