"""Cache-resident search indices: local tree and buffered lookups, a partitioned
master/slave cluster, and the analytical cost model that compares them."""

__version__ = "0.1.0"
