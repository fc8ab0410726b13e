"""Flatness, corona trees and intrinsic-graph synthesis for bilipschitz surfaces in the Heisenberg group."""

__version__ = "0.1.0"
