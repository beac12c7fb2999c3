"""Deterministic simulator of VPN-gateway connection tracking and the
session-manipulation attacks it enables (port exhaustion, TCP hijacking,
DNS hijacking)."""

from .kernels import BACKEND
from .profiles import BUILTIN, dump_profile, get_profile, profile_names
from .world import World, WorldConfig, build_world

__version__ = "0.1.0"

__all__ = ["BACKEND", "BUILTIN", "World", "WorldConfig", "build_world", "dump_profile",
           "get_profile", "profile_names", "__version__"]
