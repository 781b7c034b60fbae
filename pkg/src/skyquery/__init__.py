"""SkyQuery: sensing, analytics and routing for aerial drone video."""

__version__ = "0.1.0"
