"""Riesz potential energies of near-ball sets and shape-stability experiments."""

from .exceptions import (
    NonConvergenceError,
    OutputError,
    PreconditionError,
    RieszstabError,
)
from .kernel import (
    KernelParams,
    ReferenceConstants,
    ball_energy,
    constants_for,
    mu,
    mu_limit,
    psi,
    psi_derivative,
    sparse_deficit_bound,
    tau1,
    tau2,
    unit_ball_volume,
)
from .sets import (
    AsymmetryResult,
    GraphSet,
    RadialProfile,
    SphereGrid,
    TwoSidedGraphSet,
    VoxelSet,
    fraenkel_asymmetry,
    graph_barycenter,
    graph_volume,
    load_graph_set,
    load_voxel_set,
    save_graph_set,
    save_voxel_set,
    sphere_grid,
    symm_diff_ball,
    volume_normalize,
    voxelize_star,
    voxelized_ball,
)
from .energy import (
    EnergyEstimate,
    deficit,
    energy_graph,
    energy_voxel,
    mc_energy,
    mutual_energy,
)
from .spectral import (
    HarmonicBasis,
    Spectrum,
    analyze,
    build_basis,
    eigenvalue_rows,
    fuglede_identity_residual,
    remove_low_modes,
    second_variation,
    seminorm_direct,
    seminorm_spectral,
    synthesize,
)
from .reduction import (
    RadialTransport,
    ReductionReport,
    StageCheck,
    adjust_barycenter,
    build_radial_transport,
    consolidate,
    radial_rearrange,
    reduce_pipeline,
    truncate_to_annulus,
)

__version__ = "0.1.0"
