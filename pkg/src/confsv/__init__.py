"""Conformer speaker-verification toolkit.

Transfers ASR Conformer knowledge to speaker verification three ways:
pretrained initialization with a freeze-then-finetune schedule, frame-level
CTC-logit distillation, and a frozen-backbone speaker adaptation module.
Includes the full training recipe, scoring/calibration stack, and a
parameter/MACs accounting subsystem.
"""

from .adaptation import (
    AdaptationConfig,
    LayerAdaptor,
    SpeakerAdaptation,
    adaptation_forward,
    apply_layer_adaptor,
    build_adaptation,
    freeze_schedule,
    linear_probe,
    truncate_encoder,
)
from .autodiff import Tensor, backward, depthwise_conv1d, layer_norm, matmul, softmax, tensor
from .conformer import (
    ENCODER_PRESETS,
    ConformerBlock,
    ConformerEncoder,
    EncoderConfig,
    FeatureMap,
    conv_subsample,
    encoder_forward,
)
from .accounting import CountReport, count_adaptation_params, count_params, estimate_macs
from .datapipe import (
    Corpus,
    SynthSpeakerProfile,
    Utterance,
    add_noise,
    augment_onthefly,
    crop,
    log_mel,
    reverb,
    speed_perturb,
    synth_corpus,
)
from .heads import (
    AttentiveStatsPooling,
    EmbeddingHead,
    MfaFeature,
    SpeakerModel,
    attentive_stats_pool,
    embed,
    mfa_concat,
)
from .losses import (
    AamClassifier,
    CtcDecoder,
    RateMatcher,
    aam_softmax_loss,
    combined_loss,
    ctc_loss,
    distill_kl_loss,
)
from .scoring import (
    ScoreRecord,
    TrialList,
    adapted_snorm,
    cosine_score,
    eer,
    min_dcf,
    parse_trials,
    qmf_apply,
    qmf_fit,
)

__version__ = "0.1.0"
