"""Space-carving supervised radiance fields with a multi-hypothesis depth prior."""
__version__ = "0.1.0"
