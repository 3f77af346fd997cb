"""mbz: an extensible userspace middlebox engine.

Intercepts raw IP packets at a virtual-interface boundary, proxies
TCP/UDP flows toward an upstream network, and runs an ordered,
permissioned, resource-governed chain of traffic plugins.
"""

__version__ = "0.1.0"
