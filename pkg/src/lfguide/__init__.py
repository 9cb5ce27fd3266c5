"""Value-driven adaptive sampling of incident radiance fields for path guiding."""

__version__ = "0.1.0"
