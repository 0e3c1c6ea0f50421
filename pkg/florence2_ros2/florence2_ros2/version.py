"""
Florence-2 bridge version information.
Update this when releasing new versions.
"""

__version__ = "0.9.0"
__app_name__ = "florence2_ros2"

# Version of the published result document schema
SCHEMA_VERSION = "1.0"

# Default model and revision. A branch or tag is resolved to its commit at load
# and result documents record model@commit. Empty model_revision settings,
# FLORENCE2_MODEL_REVISION and the image build arg all fall back to this value.
DEFAULT_MODEL_ID = "microsoft/Florence-2-base"
DEFAULT_MODEL_REVISION = "main"
