"""slidebench: deterministic slide tiling, feature bags, and MIL benchmarks."""

__version__ = "0.1.0"
