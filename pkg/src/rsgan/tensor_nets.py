"""Generator and discriminator networks with their checkpoint format."""
from rsgan.checkpoint import *  # noqa: F401,F403
from rsgan.nets import *  # noqa: F401,F403
