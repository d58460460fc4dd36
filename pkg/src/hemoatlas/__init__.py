"""Pulsatile cerebral blood flow, microcirculation and conductivity atlas on tetrahedral meshes."""

__version__ = "0.1.0"
