"""Learned barrier: the scenario margin minus a squared network deviation.

The candidate barrier is hbar(x) = h(x) - (nn(x) - nn(x_e))^2, which is
pointwise at most h (so the learned set is always inside the safe set)
and touches h exactly at the anchor x_e.  The transfer condition uses a
linear class-K term: phi(x, u) = <grad hbar, f + g u> + c * hbar(x).
Because phi is affine in u, its supremum over the input box is attained
at a vertex; ties resolve to the lowest vertex index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import mlp
from .mlp import MlpParams
from .systems import ControlAffineSystem, make_system, vertices


@dataclass
class Ncbf:
    params: MlpParams
    system: ControlAffineSystem
    x_e: np.ndarray
    alpha_slope: float = 1.0

    def __post_init__(self):
        self.x_e = np.asarray(self.x_e, dtype=np.float64)
        if self.x_e.shape != (self.system.n,):
            raise ValueError(
                f"anchor must have shape ({self.system.n},), got {self.x_e.shape}")
        if self.params.n_inputs != self.system.n:
            raise ValueError("network input width does not match the state dimension")
        if self.alpha_slope <= 0:
            raise ValueError("alpha_slope must be positive")
        h_e, _ = self.system.safe_margin(self.x_e)
        if not h_e > 0:
            raise ValueError(f"anchor must lie strictly inside the safe set, h={h_e}")

    # evaluation -------------------------------------------------------

    def anchor_value(self) -> float:
        return mlp.mlp_forward(self.params, self.x_e)

    def value(self, x):
        """hbar(x) = h(x) - (nn(x) - nn(x_e))^2, batched."""
        h, _ = self.system.safe_margin(x)
        delta = mlp.mlp_forward(self.params, x) - self.anchor_value()
        return h - delta ** 2

    def gradient(self, x):
        return self.value_and_gradient(x)[1]

    def value_and_gradient(self, x):
        h, hg = self.system.safe_margin(x)
        v, g = mlp.mlp_forward_and_input_gradient(self.params, x)
        delta = np.asarray(v) - self.anchor_value()
        return h - delta ** 2, hg - 2.0 * delta[..., None] * g

    def membership(self, x):
        return self.value(x) >= 0.0

    def phi(self, x, u):
        """Barrier transfer rate <grad hbar, f + g u> + c * hbar at (x, u)."""
        u = np.asarray(u, dtype=np.float64)
        val, grad = self.value_and_gradient(x)
        f = self.system.drift(x)
        g = self.system.actuation(x)
        lie_f = np.einsum("...i,...i->...", grad, f)
        lie_g = np.einsum("...i,...ij->...j", grad, g)
        return lie_f + np.einsum("...j,...j->...", lie_g, u) + self.alpha_slope * val

    def sup_phi(self, x) -> tuple[float, int]:
        """Maximum of phi over the input-box vertices and the achieving index.

        Affinity in u means the box supremum is a vertex value; on ties
        the lowest vertex index wins.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("sup_phi takes a single state")
        val, grad = self.value_and_gradient(x)
        f = self.system.drift(x)
        g = self.system.actuation(x)
        verts = vertices(self.system.input_box)
        vals = grad @ f + (grad @ g) @ verts.T + self.alpha_slope * val
        idx = int(np.argmax(vals))
        return float(vals[idx]), idx


# barrier checkpoint ---------------------------------------------------
#
# One file: the network checkpoint block, then
#   len      int32    scenario id byte length
#   id       utf-8 bytes
#   n        int32    state dimension
#   x_e      float64[n]
#   c        float64  alpha slope


def save_ncbf(path, ncbf: Ncbf) -> None:
    with open(path, "wb") as f:
        mlp.write_params_stream(f, ncbf.params)
        ident = ncbf.system.name.encode("utf-8")
        f.write(struct.pack("<i", len(ident)))
        f.write(ident)
        f.write(struct.pack("<i", ncbf.x_e.size))
        f.write(ncbf.x_e.astype("<f8").tobytes())
        f.write(struct.pack("<d", float(ncbf.alpha_slope)))


def load_ncbf(path, system: ControlAffineSystem | None = None) -> Ncbf:
    with open(path, "rb") as f:
        params = mlp.read_params_stream(f)
        (ident_len,) = struct.unpack("<i", f.read(4))
        ident = f.read(ident_len).decode("utf-8")
        (n,) = struct.unpack("<i", f.read(4))
        x_e = np.frombuffer(f.read(8 * n), dtype="<f8").astype(np.float64)
        (c,) = struct.unpack("<d", f.read(8))
    if system is None:
        system = make_system(ident)
    elif system.name != ident:
        raise ValueError(f"checkpoint is for scenario {ident!r}, got {system.name!r}")
    return Ncbf(params=params, system=system, x_e=x_e, alpha_slope=c)
