"""ShiftTrace: performance estimation and shift attribution for deployed classifiers."""

__version__ = "0.1.0"
