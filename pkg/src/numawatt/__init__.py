"""Per-application CPU and DRAM energy attribution for multi-socket NUMA hosts."""

__version__ = "0.1.0"
