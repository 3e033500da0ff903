from ._dgl import *  # noqa: F401,F403
from ._dgl import __doc__  # noqa: F401
