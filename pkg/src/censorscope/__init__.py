"""Censorship measurement: probe agent, controller, detectors and a censor simulator."""

__version__ = "0.1.0"
