"""faaslab: a lab for serverless analytics data-exchange tradeoffs.

Runs a genomics sort+compress pipeline against an in-process, traffic-
shaped object store emulator, under two exchange strategies (all-to-all
through object storage, or gather-sort in one VM), and models the same
runs analytically at cloud scale for latency and cost.
"""

__version__ = "0.1.0"
