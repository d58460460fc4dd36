"""Effective conductivity of blood-perfused tissue from Archie's mixing law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ENDPOINT = 1e-12


@dataclass(frozen=True)
class ArchieParams:
    beta: float = 5.0 / 3.0  # cementation exponent
    sigma_fluid: float = 0.70  # S/m, blood
    check_range: bool = True

    def __post_init__(self):
        if not self.sigma_fluid > 0:
            raise ValueError("blood conductivity must be positive")
        if not self.beta > 0:
            raise ValueError("cementation exponent must be positive")
        if self.check_range and not 1.5 <= self.beta <= 5.0 / 3.0:
            raise ValueError("cementation exponent outside [3/2, 5/3]")


def archie(c, sigma_m, params: ArchieParams = ArchieParams()):
    """sigma = sigma_m (1 - c)^tau + sigma_f c^beta, tau = log(1 - c^beta) / log(1 - c).

    Both ends are 0/0 in tau and are returned as the limits sigma_m and sigma_f.
    """
    c = np.asarray(c, dtype=float)
    sm = np.broadcast_to(np.asarray(sigma_m, float), np.broadcast(c, sigma_m).shape)
    c = np.broadcast_to(c, sm.shape)
    b = params.beta
    out = np.empty(sm.shape)
    lo = c < ENDPOINT
    hi = c > 1.0 - ENDPOINT
    mid = ~(lo | hi)
    cm = c[mid]
    cb = cm**b
    tau = np.log1p(-cb) / np.log1p(-cm)
    out[mid] = sm[mid] * np.exp(tau * np.log1p(-cm)) + params.sigma_fluid * cb
    out[lo] = sm[lo]
    out[hi] = params.sigma_fluid
    return out if out.ndim else float(out)


def build_atlas(mesh, c_nodal, params: ArchieParams = ArchieParams(), sigma_m=None):
    """Nodal conductivity over the whole mesh.

    ``c_nodal`` is a full-mesh nodal array (values on artery-only nodes are
    ignored).  Background conductivity is the volume-weighted average of the
    adjacent tissue tets; every node of the artery domain gets sigma_f.
    """
    if sigma_m is None:
        sigma_m = mesh.nodal_compartment_value(mesh.tet_sigma)
    c = np.clip(np.asarray(c_nodal, float), 0.0, 1.0)
    sigma = archie(c, sigma_m, params)
    sigma = np.array(sigma, dtype=float)
    sigma[mesh.omega.nodes] = params.sigma_fluid
    return sigma
