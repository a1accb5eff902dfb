"""Angular q-space dictionary ``Gamma`` with paired ODF profiles.

The default dictionary is a bank of axially symmetric fibre kernels. For a
fibre direction ``u`` and concentration ``kappa`` the signal atom sampled on
gradient direction ``g`` is

    exp(-kappa * (u . g)**2),

normalised to unit l2 norm. It is the shape of the diffusion signal of a
single cylindrically symmetric tensor with ``b * (axial - radial) = kappa``:
lowest along the fibre, highest on the perpendicular great circle. Atoms are
kept positive (not mean-removed) so that a fit from a few directions
extrapolates smoothly to the unsampled ones; atom 0 is the constant profile.
The paired ODF atom peaks along ``u``:
``exp(-4 kappa (1 - (u . p)**2))`` on display directions ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DiffusionVolume, GradientScheme, GridShape, fibonacci_hemisphere, load_tensor

__all__ = [
    "AngularDictionary",
    "build_dictionary",
    "load_dictionary",
    "synthesize_signal",
    "estimate_odf",
    "DEFAULT_KAPPAS",
]

DEFAULT_KAPPAS = (2.0, 4.0, 8.0)
DEFAULT_ODF_POINTS = 400
ODF_SHARPENING = 4.0


@dataclass(frozen=True, eq=False)
class AngularDictionary:
    scheme: GradientScheme
    atoms: np.ndarray = field(repr=False)
    odf_atoms: np.ndarray = field(repr=False)
    atom_directions: np.ndarray = field(repr=False)
    kernel_params: np.ndarray = field(repr=False)
    display_directions: np.ndarray = field(repr=False)

    def __post_init__(self):
        G, n = np.shape(self.atoms)
        if G != self.scheme.G:
            raise ValueError(f"atoms have {G} rows but the scheme has {self.scheme.G} directions")
        if np.shape(self.odf_atoms)[1] != n or np.shape(self.odf_atoms)[0] != len(self.display_directions):
            raise ValueError("odf_atoms must be (P, N_Gamma) with P display directions")
        if np.any(np.asarray(self.odf_atoms) < 0):
            raise ValueError("ODF atoms must be nonnegative")
        if len(self.atom_directions) != n or len(self.kernel_params) != n:
            raise ValueError("need one direction and one kernel parameter per atom")

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    @property
    def G(self) -> int:
        return self.atoms.shape[0]

    def gram_norm_sq(self) -> float:
        """``lambda_max(Gamma^T Gamma)`` via power iteration."""
        from .core import spectral_norm_sq

        return spectral_norm_sq(lambda a: self.atoms @ a, lambda s: self.atoms.T @ s, self.n_atoms)


def _odf_profiles(dirs, kappas, display):
    prof = np.exp(-ODF_SHARPENING * kappas[None, :] * (1.0 - (display @ dirs.T) ** 2))
    prof[:, kappas == 0] = 1.0
    return prof


def build_dictionary(
    scheme: GradientScheme,
    n_atoms: int = 97,
    concentrations=DEFAULT_KAPPAS,
    n_display: int = DEFAULT_ODF_POINTS,
) -> AngularDictionary:
    """Default overcomplete fibre-kernel dictionary.

    ``n_atoms - 1`` anisotropic atoms are laid out as ``(n_atoms - 1) / len(concentrations)``
    Fibonacci-spiral hemisphere directions, each at every concentration; atom 0 is isotropic.
    """
    kappas = np.asarray(concentrations, dtype=float).ravel()
    if kappas.size == 0 or np.any(kappas <= 0):
        raise ValueError("concentrations must be positive")
    if n_atoms < scheme.G:
        raise ValueError(f"n_atoms={n_atoms} must be >= G={scheme.G} for an overcomplete dictionary")
    if (n_atoms - 1) % kappas.size:
        raise ValueError(f"n_atoms - 1 = {n_atoms - 1} is not a multiple of {kappas.size} concentrations")
    dirs = fibonacci_hemisphere((n_atoms - 1) // kappas.size)
    atom_dirs = np.vstack([[0.0, 0.0, 1.0], np.tile(dirs, (kappas.size, 1))])
    atom_kappas = np.concatenate([[0.0], np.repeat(kappas, len(dirs))])

    cos2 = (scheme.directions @ atom_dirs.T) ** 2
    atoms = np.exp(-atom_kappas[None, :] * cos2)
    norms = np.linalg.norm(atoms, axis=0)
    if np.any(norms == 0):
        raise ValueError("degenerate atom (constant on the scheme); use more gradient directions")
    atoms /= norms

    display = fibonacci_hemisphere(n_display)
    return AngularDictionary(scheme, atoms, _odf_profiles(atom_dirs, atom_kappas, display), atom_dirs,
                             atom_kappas, display)


def load_dictionary(scheme: GradientScheme, path, odf_path=None) -> AngularDictionary:
    """Wrap a user-supplied ``G x N_Gamma`` tensor file as a dictionary.

    Without an ODF tensor the ODF atoms are set to the clipped atoms themselves
    on the scheme directions, which is crude but keeps every interface usable.
    """
    atoms = np.asarray(load_tensor(path), dtype=float)
    if atoms.ndim != 2 or atoms.shape[0] != scheme.G:
        raise ValueError(f"{path}: expected a ({scheme.G}, N) tensor, got {atoms.shape}")
    n = atoms.shape[1]
    if odf_path is None:
        odf = np.clip(atoms, 0.0, None)
        display = scheme.directions
    else:
        odf = np.asarray(load_tensor(odf_path), dtype=float)
        if odf.ndim != 2 or odf.shape[1] != n:
            raise ValueError(f"{odf_path}: expected a (P, {n}) tensor, got {odf.shape}")
        display = fibonacci_hemisphere(odf.shape[0])
    unknown_dirs = np.tile([0.0, 0.0, 1.0], (n, 1))
    return AngularDictionary(scheme, atoms, odf, unknown_dirs, np.zeros(n), display)


def synthesize_signal(d: AngularDictionary, A: np.ndarray, shape: GridShape) -> DiffusionVolume:
    """``S = A Gamma^T`` as a volume."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape != (shape.V, d.n_atoms):
        raise ValueError(f"coefficients must be ({shape.V}, {d.n_atoms}), got {A.shape}")
    return DiffusionVolume(shape, d.scheme, A @ d.atoms.T)


def estimate_odf(d: AngularDictionary, A: np.ndarray) -> np.ndarray:
    """Per-voxel ODF on the display directions, clamped at 0 and normalised to unit sum."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] != d.n_atoms:
        raise ValueError(f"coefficients must have {d.n_atoms} columns, got {A.shape}")
    odf = np.clip(A @ d.odf_atoms.T, 0.0, None)
    total = odf.sum(axis=1, keepdims=True)
    return np.divide(odf, total, out=np.zeros_like(odf), where=total > 0)
