"""Built-in traffic plugins: snitch, firewall, dns-whatif, protocol-advisor."""

from .advisor import AdvisorPlugin
from .firewall import FirewallPlugin, FirewallRule
from .snitch import OrgMap, SnitchPlugin
from .whatif import WhatIfPlugin

__all__ = [
    "AdvisorPlugin", "FirewallPlugin", "FirewallRule", "OrgMap",
    "SnitchPlugin", "WhatIfPlugin",
]
