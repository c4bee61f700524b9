"""
emshape: eddy-current loss shape optimization for interior permanent magnet rotors.
"""

__version__ = "0.1.0"
