"""Structured-dropout regularization toolkit for shallow linear networks."""

from .dropout_schemes import (
    BERNOULLI,
    DROPBLOCK_ORIGINAL,
    DROPBLOCK_PARTITIONED,
    DROPCONNECT,
    CharacteristicMatrix,
    DropoutScheme,
    MaskSample,
    characteristic_matrix,
    regularizer_dropblock,
    regularizer_dropconnect,
    regularizer_generalized,
    sample_mask,
    sample_mask_batch,
    theta_correction,
)
from .errors import (
    BlockPartitionError,
    ConvergenceError,
    DegenerateFactorError,
    DegenerateSchemeError,
    DimensionError,
    DivergenceError,
    DropRegError,
    EnumerationTooLargeError,
    InvalidSpectrumError,
    RankDeficiencyError,
)
from .experiment_cli import (
    ExperimentSpec,
    SyntheticDataset,
    emit_csv,
    main,
    run_experiment,
    synthesize_dataset,
)
from .matrix_kernel import (
    DenseMatrix,
    SeededRng,
    SvdResult,
    gaussian_matrix,
    matmul,
    svd,
)
from .spectral_regularizer import (
    BalanceReport,
    FactorPair,
    SpectralMinimizer,
    balance_report,
    block_norms,
    duplicate_halving,
    fenchel_conjugate,
    global_minimizer,
    k_support_sq,
    objective_f,
    rebalance,
    rebalance_until_stable,
    theta_for_width,
    width_scaled_penalty,
)
from .trainer import (
    TraceRecord,
    TrainingConfig,
    TrainingTrace,
    expected_objective_exact,
    expected_objective_mc,
    retain_mean,
    sgd_step,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
