"""Florence-2 vision-language model node for ROS 2."""

from .version import __app_name__, __version__

__all__ = ["__app_name__", "__version__"]
