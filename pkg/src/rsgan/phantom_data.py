"""Synthetic phantoms, DRR / pseudo-CXR rendering and the on-disk dataset format."""
from rsgan.dataset import *  # noqa: F401,F403
from rsgan.phantom import *  # noqa: F401,F403
