"""Rank-aware streaming inference for SVD-compressed transformer encoders."""
from .attention import (dense_attention_oracle, flash_svd_attention, flash_svd_attention_forward,
                        load_tile, project_factors)
from .encoder import load_model, run_layer, run_model, save_model, synth_model
from .errors import (AccountingError, BudgetError, ConfigError, FlashSVDError, FormatError,
                     InfeasibleError, NumericError, RankError, ShapeError)
from .factorizer import (AttentionFactorSet, FactorizedLinear, factorize_attention, factorize_linear,
                         param_count, param_threshold, rank_loss_for_budget)
from .ffn import FfnFactors, ffn_dense_oracle, ffn_naive_lowrank, ffn_v1, ffn_v2
from .memtier import MemoryMeter, TilePlan, expected_bytes, validate_tile_plan
from .planner import Geometry, HardwareModel
from .tensor import gemm, svd, truncate_even_split

__version__ = "0.1.0"
