"""
beatforge: joint beat and downbeat tracking with a spectral-temporal
transformer (SpecTNT), a dilated TCN baseline, their fusion, and a
bar-pointer DBN decoder.
"""

__version__ = "0.1.0"
