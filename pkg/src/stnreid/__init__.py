"""Pairwise spatial transformer networks for partial person re-identification."""
from .nnops import Parameter, adam_step, gradient_check
from .stn import STN, LocalizationNet, affine_warp, bilinear_sample, concat_pair, grid_generate
from .reid import Extractor, ExtractorSpec, adaptive_triplet_loss, id_loss, stn_loss, total_loss
from .data import (crop_rect, crop_theta, generate_partial, load_dataset, make_partial_benchmark, make_rng,
                   pk_sample, synth_dataset)
from .evaluation import bench_matching, cmc, evaluate_protocol, score_no_stn, score_pair_batch, score_stn
from .gradsuite import run_suite
from .trainer import (Checkpoint, STNReID, TrainConfig, load_config, lr_schedule, merge_checkpoints,
                      pretrain_checkpoint, run_experiment_matrix, table2_config, train_reid_only,
                      train_single_stage, train_stage1, train_stage2_mm, train_stage2_pm)

__version__ = "0.1.0"
