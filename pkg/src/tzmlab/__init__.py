"""tzmlab: a TrustZone-M style microcontroller simulator, an attack and
defense laboratory for classic memory-corruption techniques on that
machine, and a static firmware scanner for gadget surface estimation."""

__version__ = "0.1.0"
