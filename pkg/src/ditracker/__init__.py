"""Point tracking on top of toy video diffusion transformer attention costs."""
__version__ = "0.1.0"
