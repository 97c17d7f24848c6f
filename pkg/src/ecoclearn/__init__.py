"""Learned error-correcting output-code codebooks via contrastive training,
with gradient-based adversarial robustness evaluation."""

from .attacks import AttackConfig, attack_batch, evaluate, fgsm, pgd
from .codebook import (Codebook, SeparationReport, binarize, cosine_decode,
                       decode_probabilities, generate_codebook, hamming_decode,
                       load_codebook, save_codebook, separation_report)
from .data import (AugmentationConfig, Dataset, augment_pair, load_dataset_csv,
                   load_idx, make_blobs, make_texture_images,
                   replicate_channels, save_dataset_csv, split)
from .losses import (FinetuneParts, LossConfig, PretrainParts,
                     column_separation_loss, cross_entropy_loss, finetune_loss,
                     hinge_codeword_loss, info_nce_loss, mcsm_loss,
                     pretrain_loss, row_separation_loss)
from .network import (NetConfig, NetworkParams, forward_baseline,
                      forward_finetune, forward_pretrain, init_params,
                      load_checkpoint, save_checkpoint, transfer_pretrained)
from .tensor import (NonFiniteError, Tensor, TensorError, ZeroNormError,
                     cosine_similarity, finite_difference_check, softmax)
from .training import (TrainConfig, TrainedModel, TrainReport, finetune_cfpc,
                       finetune_pf, pretrain, run_pipeline, train_simclr,
                       train_standard, train_tfc)

__version__ = "0.1.0"
