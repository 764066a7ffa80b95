"""Contrastive 3D representation learning guided by masked point modeling."""

from .geometry import (AugmentSpec, PointCloud, augment, chamfer_l2, fps,
                       knn_group, normalize_unit_sphere, read_rcpts, write_rcpts)
from .tokenizer import (MaskSpec, PatchEmbed, PatchSet, PosEmbed, TokenBatch,
                        build_token_batch, mask_select, patchify)
from .model import (ForwardOutput, ModelConfig, PlainEncoderModel, ReConModel,
                    TwoTowerModel, attention_distance, build_model,
                    load_checkpoint, parameter_counts, save_checkpoint)
from .losses import (LossReport, contrastive_metric, cosine_con_loss,
                     infonce_cmc_loss, l2_con_loss, mpm_loss, recon_total,
                     smooth_l1_con_loss, supcon_loss)
from .teachers import (OracleTeacher, OracleTeacherSpec, TeacherEmbedding,
                       load_embeddings, prompt_grid, save_embeddings,
                       text_class_embedding)
from .data import (DatasetManifest, EpisodeSpec, gen_synthetic, sample_episode,
                   sample_shape, shuffle_image_pairing)
from .harness import (ProtocolSpec, RunConfig, analyze_attention, fewshot,
                      finetune, lr_schedule, pretrain, zeroshot)

__version__ = "0.1.0"
