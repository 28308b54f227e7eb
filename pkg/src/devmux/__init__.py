"""devmux: a simulated accelerator with two driver stacks over it.

The device (``simdev``) is multiplexed either by per-application library
drivers over a small privileged core (``libdrv`` + ``devcore``) or by one
monolithic kernel-style driver (``legacydrv``).  ``bench`` runs identical
workloads on both and keeps score.
"""

from devmux.devcore import DeviceCore, InfoPage
from devmux.legacydrv import LegacyDriver
from devmux.libdrv import LibraryDriver
from devmux.platform import CostLedger, Platform, SystemMemory
from devmux.simdev import IommuUnit, PageTable, SimDevice, fnv1a64

__version__ = "0.1.0"

__all__ = ["CostLedger", "DeviceCore", "InfoPage", "IommuUnit",
           "LegacyDriver", "LibraryDriver", "PageTable", "Platform",
           "SimDevice", "SystemMemory", "fnv1a64", "__version__"]
