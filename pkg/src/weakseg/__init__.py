"""Single-stage weakly supervised semantic segmentation on a frozen encoder.

Image-level labels drive everything: a frozen image/text encoder yields
initial class activation maps in closed form, a small transformer decoder
predicts segmentation logits, and an online refinement module turns the
activation maps into pixel pseudo labels that supervise the decoder while
the encoder never receives a gradient.
"""

__version__ = "0.1.0"

from .archive import read_archive, write_archive
from .backbone import (BackboneConfig, FrozenBackbone, ImageBatch,
                       PooledImageEmbedding, dump_backbone, load_backbone,
                       make_synthetic_backbone)
from .camgen import (CamStack, ClassVocabulary, build_prompts, channel_weights,
                     class_distance, class_scores, compute_cam_stack,
                     initial_cam, max_normalize, voc_vocabulary)
from .datakit import (DatasetManifest, SampleRecord, confusion_matrix,
                      load_dataset, make_synthetic_dataset, miou,
                      multi_scale_infer)
from .decoder import Decoder, load_decoder_state, save_decoder
from .errors import DataError, NumericError
from .rfm import (FilterMask, affinity_map, attention_filter, attention_score,
                  class_box_mask, par_refine, refine_cam, refining_map,
                  sinkhorn_normalize, to_pseudo_label)
from .training import (LossBreakdown, TrainConfig, TrainState, affinity_label,
                       affinity_loss, load_config, segmentation_loss,
                       total_loss, train, train_fully_supervised, train_step)
