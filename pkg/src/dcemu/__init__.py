"""Bayesian deep-learning emulator for pixelwise atmospheric correction."""
from .autodiff import Adam, Parameter, Tensor, grad_check, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import EvalReport, RasterPair, evaluate_pairs
from .model import (Batch, DcPrediction, ModelConfig, PredictiveDistribution, build_model,
                    classify_cloud, dc_loss, mc_predict, static_predict, train)

__version__ = "0.1.0"
