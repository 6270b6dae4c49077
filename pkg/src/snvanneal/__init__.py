"""Analysis and simulation toolkit for laser-annealed Sn colour centres in diamond."""

__version__ = "0.1.0"
