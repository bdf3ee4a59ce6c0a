"""Man-on-the-side TCP injection testbed: simulator, protocols, attacker, detectors."""

__version__ = "0.1.0"
