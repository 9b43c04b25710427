from .cases import (
    CALIBRATION_RULES,
    DEFAULT_MATCH_THRESHOLD,
    PRIVACY_RULES,
    RULE_GT,
    RULE_VARIANT,
    PrivacyReport,
    ValidationCase,
    build_report,
    generate_cases,
    load_case_rows,
    match,
    match_cases,
    match_embeddings,
    matcher_accuracy,
    p_pre,
    p_pre_from_counts,
    save_cases,
)
from .metrics import PSNR_IDENTICAL, gaussian_blur, gaussian_kernel, ied, psnr, ssim, ssim_torch
from .recovery import RecoveryModel, aligned_pairs, check_alignment, recover, train_recovery
