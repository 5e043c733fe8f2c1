from __future__ import annotations

from .. import ndauto as nd
from ..metrics import DEFAULT_SSIM, SSIMConfig, ssim_tensor


def stage_loss(pred, gt, alpha: float = 1.0, beta: float = 1.0, cfg: SSIMConfig = DEFAULT_SSIM):
    """``alpha * (1 - SSIM) + beta * MSE`` for one stage."""
    pred, gt = nd.as_tensor(pred), nd.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ in shape")
    mse = nd.mean_all(nd.square(pred - gt))
    return alpha * (1.0 - ssim_tensor(pred, gt, cfg)) + beta * mse


def composite_loss(pred_demix, gt_demix, pred_recon, gt_recon, alpha: float = 1.0, beta: float = 1.0,
                   cfg: SSIMConfig = DEFAULT_SSIM):
    """Demixing loss plus reconstruction loss, each SSIM + MSE weighted by alpha, beta."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    return (stage_loss(pred_demix, gt_demix, alpha, beta, cfg)
            + stage_loss(pred_recon, gt_recon, alpha, beta, cfg))
