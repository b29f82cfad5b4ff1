"""everhub: launch interactive container sessions straight from git repositories."""

__version__ = "0.1.0"
