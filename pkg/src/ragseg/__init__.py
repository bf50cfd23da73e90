"""Retrieval-augmented guided segmentation: a retrieval encoder and a
segmentation backbone trained jointly from a single segmentation loss, with
guides drawn from an epoch-refreshed knowledge base."""

from .data import (Dataset, DatasetError, LoadError, SliceRecord, SplitSpec,
                   ValidationError, generate_toy_dataset, load_dataset,
                   save_dataset, split_by_patient)
from .fusion import (ChannelAdapter, CrossAttentionFusion, FusedGuide,
                     FusedInput, FusionConfig, FusionStrategy, FusionWeights,
                     cross_attention_fuse, dual_encoder_fuse, early_fuse,
                     fuse_guides, fusion_weights)
from .metrics import (CaseResult, EvalReport, aggregate, case_analysis,
                      dice_score, hausdorff)
from .noise import (NoiseConfig, add_dropout, add_gaussian, add_salt_pepper,
                    apply_guide_noise)
from .retrieval import (ContrastiveBatch, KnowledgeBase, RetrievalConfig,
                        RetrievalError, RetrievalHit, RetrievalModel,
                        build_knowledge_base, contrastive_capacity, cosine_sim,
                        dynamic_k, embed, make_contrastive_pairs, nt_xent_loss,
                        retrieve_topk)
from .segmentation import (TinyCNN, TinyViT, build_backbone, predict,
                           register_backbone, seg_loss, soft_dice_mean)
from .train import (TrainConfig, TrainState, build_models, evaluate,
                    joint_train, pretrain_retrieval, pretrain_segmentation,
                    train_joint_pipeline)

__version__ = "0.1.0"
