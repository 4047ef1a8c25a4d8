"""
Diffusion Coupler

Minimum-entropy coupling of two unpaired datasets with a pair of cooperating
conditional diffusion models.
"""

from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version("diffusion-coupler")
except PackageNotFoundError:
    # Running from source without installation
    __version__ = "0.0.0-dev"
