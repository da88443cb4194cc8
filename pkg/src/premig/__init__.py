"""Avatar-task pre-migration simulator and Hybrid-MAPPO training."""
__version__ = "0.1.0"
