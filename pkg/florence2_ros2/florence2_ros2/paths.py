"""
Locate data files whether running from an installed colcon workspace or
straight from a source checkout.
"""

import os
from pathlib import Path

PACKAGE_NAME = "florence2_ros2"
INTERFACES_PACKAGE = "florence2_interfaces"

_SOURCE_ROOT = Path(__file__).resolve().parent.parent


def _ament_share(package: str):
    try:
        from ament_index_python.packages import (
            PackageNotFoundError,
            get_package_share_directory,
        )
    except ImportError:
        return None
    try:
        return Path(get_package_share_directory(package))
    except (PackageNotFoundError, LookupError, ValueError):
        return None


def get_share_dir() -> Path:
    """Share directory of the implementation package (config/, launch/)."""
    share = _ament_share(PACKAGE_NAME)
    if share is not None and (share / "config").is_dir():
        return share
    return _SOURCE_ROOT


def get_interfaces_dir() -> Path:
    """Share directory of the interfaces package (srv/, action/, schema/)."""
    override = os.environ.get("FLORENCE2_INTERFACES_DIR")
    if override:
        return Path(override)
    share = _ament_share(INTERFACES_PACKAGE)
    if share is not None and (share / "schema").is_dir():
        return share
    return _SOURCE_ROOT.parent / INTERFACES_PACKAGE


def get_registry_path() -> Path:
    return get_share_dir() / "config" / "tasks.yaml"


def get_params_path() -> Path:
    return get_share_dir() / "config" / "params.yaml"


def get_schema_path() -> Path:
    return get_interfaces_dir() / "schema" / "result_document.schema.json"
